"""Rotations and similarity transforms shared across the toolkit.

Conventions used everywhere in this package:

* canonical mesh frame: x left->right, y down->up, z back->front, units mm
* Euler rotations are intrinsic X-then-Y-then-Z, i.e. R = Rx(ax) @ Ry(ay) @ Rz(az)
* a similarity transform maps p -> scale * R(angles) @ p + translation
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(angles: np.ndarray) -> np.ndarray:
    """Rotation matrix for intrinsic X-then-Y-then-Z Euler angles (radians)."""
    ax, ay, az = np.asarray(angles, dtype=float)
    return rotation_x(ax) @ rotation_y(ay) @ rotation_z(az)


def rotation_matrix_derivatives(angles: np.ndarray) -> np.ndarray:
    """Stack of dR/d(angle_i), shape (3, 3, 3), for the intrinsic XYZ convention."""
    ax, ay, az = np.asarray(angles, dtype=float)
    rx, ry, rz = rotation_x(ax), rotation_y(ay), rotation_z(az)
    c, s = np.cos(ax), np.sin(ax)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    c, s = np.cos(ay), np.sin(ay)
    dry = np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    c, s = np.cos(az), np.sin(az)
    drz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    return np.stack([drx @ ry @ rz, rx @ dry @ rz, rx @ ry @ drz])


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * R(rotation) @ p + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.scale * rotation_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ rotation_matrix(self.rotation).T + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equivalent to applying `other` first, then `self`.

        Only valid as a point map; the Euler angles of the composition are
        recovered from the combined rotation matrix.
        """
        r = rotation_matrix(self.rotation) @ rotation_matrix(other.rotation)
        return SimilarityTransform(
            scale=self.scale * other.scale,
            rotation=euler_from_matrix(r),
            translation=self.scale * rotation_matrix(self.rotation) @ other.translation
            + self.translation,
        )


def euler_from_matrix(r: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler angles of a rotation matrix (inverse of rotation_matrix).

    Gimbal-locked inputs (|r[0, 2]| == 1) resolve with az = 0.
    """
    r = np.asarray(r, dtype=float)
    sy = np.clip(r[0, 2], -1.0, 1.0)
    ay = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = np.arctan2(-r[1, 2], r[2, 2])
        az = np.arctan2(-r[0, 1], r[0, 0])
    else:
        ax = np.arctan2(np.sign(sy) * r[1, 0], r[1, 1])
        az = 0.0
    return np.array([ax, ay, az])
