"""Orthographic camera, z-buffer rasterizer, and landmark polygon masks.

Image conventions: pixel (row, col) has its center at continuous
coordinates (x, y) = (col + 0.5, row + 0.5); projected x maps to columns
and projected y to rows. The camera looks along +z after rotation, so a
smaller rotated z is nearer; depth maps hold the rotated z in mm with
+inf where nothing was drawn. Rendering has no lighting: color is the
sampled texture (nearest texel, no antialiasing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .meshes import TriMesh
from .transforms import rotation_matrix


@dataclass(frozen=True)
class CameraParams:
    """Orthographic camera: p2d = scale * (R(rotation) @ p3d)[:2] + translation.

    rotation holds intrinsic X-then-Y-then-Z Euler angles in radians;
    rotation[1] is the yaw about the vertical axis.
    """

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"camera scale must be positive and finite, got {self.scale}")
        rot = np.asarray(self.rotation, dtype=float).ravel()
        tr = np.asarray(self.translation, dtype=float).ravel()
        if rot.shape != (3,) or tr.shape != (2,):
            raise ValueError("rotation must be 3 angles and translation 2 offsets")
        if not (np.isfinite(rot).all() and np.isfinite(tr).all()):
            raise ValueError("camera parameters must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)


@dataclass(frozen=True)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1], zero where mask is false
    depth: np.ndarray  # (H, W) rotated z in mm, +inf where empty
    mask: np.ndarray  # (H, W) bool coverage

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape or self.depth.shape != self.mask.shape:
            raise ValueError("rgb/depth/mask resolutions disagree")


def project_orthographic(points: np.ndarray, cam: CameraParams) -> np.ndarray:
    """Project (n, 3) mm points to (n, 2) image coordinates."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rotated = points @ rotation_matrix(cam.rotation).T
    return cam.scale * rotated[:, :2] + cam.translation


def rotated_depth(points: np.ndarray, cam: CameraParams) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return points @ rotation_matrix(cam.rotation).T[:, 2]


def rasterize(
    mesh: TriMesh, cam: CameraParams, texture: np.ndarray, resolution: tuple[int, int]
) -> RenderOutput:
    """Z-buffered triangle fill with barycentric UV interpolation.

    `resolution` is (height, width). Back-face culling is off; depth ties
    go to the lower face index (strict z test, faces in order).
    """
    if mesh.uv is None:
        raise ValueError("rasterize requires a mesh with uv")
    h, w = int(resolution[0]), int(resolution[1])
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be at least 1x1, got {resolution}")
    texture = np.asarray(texture, dtype=float)
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise ValueError("texture must be (h, w, 3)")

    p2d = project_orthographic(mesh.vertices, cam)
    zrot = rotated_depth(mesh.vertices, cam)

    depth = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))
    owner = np.full((h, w), -1, dtype=np.int64)
    uv_buf = np.zeros((h, w, 2))

    for fi, (i0, i1, i2) in enumerate(mesh.faces):
        tri = p2d[[i0, i1, i2]]
        area2 = (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1]) - (
            tri[1, 1] - tri[0, 1]
        ) * (tri[2, 0] - tri[0, 0])
        if area2 == 0.0:
            continue
        xmin = max(int(np.floor(tri[:, 0].min() - 0.5)), 0)
        xmax = min(int(np.ceil(tri[:, 0].max() - 0.5)), w - 1)
        ymin = max(int(np.floor(tri[:, 1].min() - 0.5)), 0)
        ymax = min(int(np.ceil(tri[:, 1].max() - 0.5)), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        xs = np.arange(xmin, xmax + 1) + 0.5
        ys = np.arange(ymin, ymax + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)

        def edge(pa, pb):
            return (pb[0] - pa[0]) * (gy - pa[1]) - (pb[1] - pa[1]) * (gx - pa[0])

        w0 = edge(tri[1], tri[2])
        w1 = edge(tri[2], tri[0])
        w2 = edge(tri[0], tri[1])
        inside = (
            ((w0 >= 0) & (w1 >= 0) & (w2 >= 0))
            if area2 > 0
            else ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        )
        if not inside.any():
            continue
        # w/area2 is positive on the inside for either winding
        b0, b1, b2 = w0 / area2, w1 / area2, w2 / area2
        z = b0 * zrot[i0] + b1 * zrot[i1] + b2 * zrot[i2]
        rows = gy[inside].astype(int)  # centers at row + 0.5 floor back to row
        cols = gx[inside].astype(int)
        zi = z[inside]
        nearer = zi < depth[rows, cols]
        rows, cols, zi = rows[nearer], cols[nearer], zi[nearer]
        if len(rows) == 0:
            continue
        depth[rows, cols] = zi
        owner[rows, cols] = fi
        uv_pix = (
            b0[inside][nearer][:, None] * mesh.uv[i0]
            + b1[inside][nearer][:, None] * mesh.uv[i1]
            + b2[inside][nearer][:, None] * mesh.uv[i2]
        )
        uv_buf[rows, cols] = uv_pix

    mask = owner >= 0
    if mask.any():
        th, tw = texture.shape[:2]
        uv = uv_buf[mask]
        tc = np.clip((uv[:, 0] * tw).astype(int), 0, tw - 1)
        tr = np.clip((uv[:, 1] * th).astype(int), 0, th - 1)
        rgb[mask] = texture[tr, tc]
    return RenderOutput(rgb=rgb, depth=depth, mask=mask)


def landmark_mask(landmarks, resolution: tuple[int, int]) -> np.ndarray:
    """Fill the closed polygon of the outer landmark contour (even-odd rule).

    `landmarks` is a LandmarkSet2D (group 0 is the outer contour) or a
    plain (k, 2) polygon. Pixels whose centers lie exactly on an edge are
    included.
    """
    outer = getattr(landmarks, "outer_polygon", None)
    poly = np.asarray(outer() if callable(outer) else landmarks, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise ValueError("outer contour must have at least 3 points")
    if np.ptp(poly[:, 0]) == 0.0 or np.ptp(poly[:, 1]) == 0.0:
        raise ValueError("outer contour polygon is degenerate")
    h, w = int(resolution[0]), int(resolution[1])
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    gx, gy = np.meshgrid(xs, ys)

    crossings = np.zeros((h, w), dtype=int)
    on_edge = np.zeros((h, w), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 != y1:
            # horizontal-ray even-odd crossing, half-open in y to count
            # shared vertices once
            cond = ((gy >= min(y0, y1)) & (gy < max(y0, y1)))
            with np.errstate(invalid="ignore"):
                xint = x0 + (gy - y0) * (x1 - x0) / (y1 - y0)
            crossings += (cond & (gx < xint)).astype(int)
        # exact-on-segment test for boundary inclusion
        ex, ey = x1 - x0, y1 - y0
        seg2 = ex * ex + ey * ey
        t = ((gx - x0) * ex + (gy - y0) * ey) / seg2
        t = np.clip(t, 0.0, 1.0)
        d2 = (x0 + t * ex - gx) ** 2 + (y0 + t * ey - gy) ** 2
        on_edge |= d2 < 1e-18
    return (crossings % 2 == 1) | on_edge


# ---------------------------------------------------------------------------
# image I/O


def save_png(image: np.ndarray, path) -> None:
    """Save float [0,1] RGB (H, W, 3) or boolean/float mask (H, W) as PNG."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(float)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "RGB" if data.ndim == 3 else "L"
    Image.fromarray(data, mode=mode).save(Path(path))


def load_png(path) -> np.ndarray:
    """Load a PNG as float in [0, 1]; RGB images return (H, W, 3)."""
    img = Image.open(Path(path))
    arr = np.asarray(img, dtype=float) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr


def save_depth_tiff(depth: np.ndarray, path) -> None:
    """32-bit float TIFF; +inf (empty pixels) is stored as-is."""
    Image.fromarray(np.asarray(depth, dtype=np.float32), mode="F").save(Path(path))


def load_depth_tiff(path) -> np.ndarray:
    return np.asarray(Image.open(Path(path)), dtype=np.float64)
