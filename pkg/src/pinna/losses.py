"""The fitting losses and their weighted total.

Everything here is a pure evaluator over explicit inputs. The default
weights are the reference preset used by the CLI; the photometric term is
normalized by pixel count so the same weight transfers across resolutions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshes import chamfer_distance, _readonly
from .render import CameraParams, RenderOutput

N_LANDMARKS = 55
DEFAULT_CONTOUR_SAMPLES = 128

CAMERA_SCALE_RANGE = (0.5, 4.0)
CAMERA_YAW_RANGE = (-1.5, -0.5)

OCCLUSION_LABELS = ("clean", "hair", "earring")


@dataclass(frozen=True)
class LandmarkSet2D:
    """55 image landmarks split into 4 ordered contour groups.

    `groups` are index sequences into `points`; they are disjoint, cover
    0..54, each has at least 2 points, and each is ordered along its
    contour. Group 0 is the outer contour.
    """

    points: np.ndarray  # (55, 2)
    groups: tuple
    occlusion: str = "clean"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected ({N_LANDMARKS}, 2) landmark points, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("landmark points must be finite")
        groups = tuple(np.asarray(g, dtype=np.int64) for g in self.groups)
        if len(groups) != 4:
            raise ValueError(f"expected 4 contour groups, got {len(groups)}")
        if any(len(g) < 2 for g in groups):
            raise ValueError("every contour group needs at least 2 points")
        flat = np.concatenate(groups)
        if sorted(flat.tolist()) != list(range(N_LANDMARKS)):
            raise ValueError("groups must partition landmark indices 0..54")
        if self.occlusion not in OCCLUSION_LABELS:
            raise ValueError(f"occlusion must be one of {OCCLUSION_LABELS}")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "groups", tuple(_readonly(g) for g in groups))

    def outer_polygon(self) -> np.ndarray:
        return self.points[self.groups[0]]

    def with_points(self, points: np.ndarray) -> "LandmarkSet2D":
        return LandmarkSet2D(points, self.groups, self.occlusion)

    def same_structure(self, other: "LandmarkSet2D") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups))


def save_landmarks(lms: LandmarkSet2D, path) -> None:
    payload = {
        "points": lms.points.tolist(),
        "groups": [g.tolist() for g in lms.groups],
        "occlusion": lms.occlusion,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_landmarks(path) -> LandmarkSet2D:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid landmark JSON: {exc}") from exc
    for key in ("points", "groups"):
        if key not in payload:
            raise ValueError(f"{path}: landmark JSON missing {key!r}")
    try:
        return LandmarkSet2D(
            points=np.asarray(payload["points"], dtype=float),
            groups=tuple(payload["groups"]),
            occlusion=payload.get("occlusion", "clean"),
        )
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# polyline resampling


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """`n` points uniformly spaced by arclength, endpoints included.

    A zero-length polyline collapses to its first point repeated.
    """
    points = np.asarray(points, dtype=float)
    if n < 2:
        raise ValueError("need at least 2 samples")
    seg = np.diff(points, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    total = lengths.sum()
    if total == 0.0:
        return np.repeat(points[:1], n, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = np.linspace(0.0, total, n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
    t = (s - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1.0)
    return points[idx] + t[:, None] * seg[idx]


# ---------------------------------------------------------------------------
# losses


def contour_loss(
    pred: LandmarkSet2D, gt: LandmarkSet2D, samples_per_contour: int = DEFAULT_CONTOUR_SAMPLES
) -> float:
    """Mean over the 4 contours of the chamfer distance between densely
    resampled prediction and ground-truth polylines."""
    if not pred.same_structure(gt):
        raise ValueError("prediction and ground truth have different contour groups")
    total = 0.0
    for g in gt.groups:
        p = resample_polyline(pred.points[g], samples_per_contour)
        q = resample_polyline(gt.points[g], samples_per_contour)
        total += chamfer_distance(p, q)
    return total / 4.0


def similarity_loss(betas: np.ndarray) -> float:
    """Mean cosine similarity over ordered pairs of a batch of latent codes."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    bs = len(betas)
    if bs < 2:
        raise ValueError("similarity loss needs a batch of at least 2 codes")
    norms = np.linalg.norm(betas, axis=1)
    if (norms == 0).any():
        raise ValueError("similarity loss is undefined for zero latent codes")
    unit = betas / norms[:, None]
    gram = unit @ unit.T
    return float((gram.sum() - np.trace(gram)) / (bs * (bs - 1)))


def range_loss(x: float, x_min: float, x_max: float) -> float:
    """Quadratic penalty outside [x_min, x_max], zero inside."""
    if x_min > x_max:
        raise ValueError("x_min must be <= x_max")
    if x < x_min:
        return float((x_min - x) ** 2)
    if x > x_max:
        return float((x - x_max) ** 2)
    return 0.0


def camera_loss(cam: CameraParams) -> float:
    """Range penalties keeping scale and yaw in their plausible bands."""
    return range_loss(cam.scale, *CAMERA_SCALE_RANGE) + range_loss(
        cam.rotation[1], *CAMERA_YAW_RANGE
    )


def landmark_loss(pred2d: np.ndarray, gt: LandmarkSet2D) -> float:
    """Mean landmark error normalized by the ground-truth bbox diagonal."""
    pred2d = np.asarray(pred2d, dtype=float)
    if pred2d.shape != (N_LANDMARKS, 2):
        raise ValueError(f"expected ({N_LANDMARKS}, 2) predictions, got {pred2d.shape}")
    diag = float(np.linalg.norm(np.ptp(gt.points, axis=0)))
    if diag == 0.0:
        raise ValueError("ground-truth landmarks have a degenerate bounding box")
    return float(np.linalg.norm(gt.points - pred2d, axis=1).sum() / (N_LANDMARKS * diag))


def photometric_loss(image: np.ndarray, rendered: RenderOutput, mask: np.ndarray) -> float:
    """Pixel-count-normalized L2 error between the masked input image and
    the render (zero outside its coverage)."""
    image = np.asarray(image, dtype=float)
    mask = np.asarray(mask)
    h, w = rendered.depth.shape
    if image.shape != (h, w, 3) or mask.shape != (h, w):
        raise ValueError(
            f"resolution mismatch: image {image.shape}, mask {mask.shape}, render {(h, w)}"
        )
    diff = mask[:, :, None] * image - rendered.rgb
    return float(np.linalg.norm(diff.ravel()) / np.sqrt(h * w))


def reg_loss(beta: np.ndarray, theta: np.ndarray) -> float:
    """Mean absolute value of each latent code, summed."""
    beta = np.asarray(beta, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    if beta.size == 0 or theta.size == 0:
        raise ValueError("latent codes must be non-empty")
    return float(np.abs(beta).mean() + np.abs(theta).mean())


# ---------------------------------------------------------------------------
# weighted total


@dataclass(frozen=True)
class LossWeights:
    contour: float = 100.0
    sim: float = 1.0
    cam: float = 100.0
    lmk: float = 10.0
    photo: float = 100.0
    smooth: float = 10.0
    reg: float = 0.005

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ValueError(f"negative loss weight {name}={value}")

    def as_dict(self) -> dict:
        return {
            "contour": self.contour,
            "sim": self.sim,
            "cam": self.cam,
            "lmk": self.lmk,
            "photo": self.photo,
            "smooth": self.smooth,
            "reg": self.reg,
        }


@dataclass(frozen=True)
class LossComponents:
    contour: float = 0.0
    sim: float = 0.0
    cam: float = 0.0
    lmk: float = 0.0
    photo: float = 0.0
    smooth: float = 0.0
    reg: float = 0.0

    def as_dict(self) -> dict:
        return {
            "contour": self.contour,
            "sim": self.sim,
            "cam": self.cam,
            "lmk": self.lmk,
            "photo": self.photo,
            "smooth": self.smooth,
            "reg": self.reg,
        }


def total_loss(components: LossComponents, weights: LossWeights) -> float:
    """Weighted sum of the seven loss components."""
    c, w = components.as_dict(), weights.as_dict()
    return float(sum(w[k] * c[k] for k in c))
