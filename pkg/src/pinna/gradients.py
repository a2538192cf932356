"""Hand-derived gradients for the fitting losses, plus finite differences.

Analytic gradients exist for the contour, similarity, camera/range,
landmark, regularization, and smoothness losses and for the decode /
projection chains. Nearest-neighbour assignments and closest-feature
selections are held fixed (they are locally constant almost everywhere),
so each formula is the true gradient away from switching sets. The
rasterizer's output is piecewise constant in its parameters, so the
photometric loss only differentiates by finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .losses import (
    CAMERA_SCALE_RANGE,
    CAMERA_YAW_RANGE,
    LandmarkSet2D,
    N_LANDMARKS,
    resample_polyline,
)
from .meshes import TriMesh, uniform_laplacian, vertex_adjacency
from .render import CameraParams
from .transforms import rotation_matrix, rotation_matrix_derivatives


def finite_difference_gradient(f, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences with per-coordinate step rel_step * max(1, |x_i|)."""
    x = np.asarray(x, dtype=float)
    base = f(x)
    if not np.isfinite(base):
        raise ValueError(f"loss is not finite at the evaluation point ({base})")
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x.flat[i]))
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def gradient(loss_fn, params: np.ndarray, mode: str = "finite-difference",
             analytic_fn=None, rel_step: float = 1e-4) -> np.ndarray:
    """Gradient of a scalar loss with respect to a flat parameter vector.

    mode "analytic" dispatches to `analytic_fn`; mode "finite-difference"
    uses central differences. Raises if the loss is not finite at `params`.
    """
    params = np.asarray(params, dtype=float)
    value = loss_fn(params)
    if not np.isfinite(value):
        raise ValueError(f"loss is not finite at the evaluation point ({value})")
    if mode == "analytic":
        if analytic_fn is None:
            raise ValueError("analytic mode requires analytic_fn")
        return np.asarray(analytic_fn(params), dtype=float)
    if mode == "finite-difference":
        return finite_difference_gradient(loss_fn, params, rel_step)
    raise ValueError(f"unknown gradient mode {mode!r}")


# ---------------------------------------------------------------------------
# simple losses


def range_loss_grad(x: float, x_min: float, x_max: float) -> float:
    if x < x_min:
        return float(-2.0 * (x_min - x))
    if x > x_max:
        return float(2.0 * (x - x_max))
    return 0.0


def camera_loss_grad(cam: CameraParams):
    """(d/d scale, d/d yaw) of the camera range loss."""
    return (
        range_loss_grad(cam.scale, *CAMERA_SCALE_RANGE),
        range_loss_grad(cam.rotation[1], *CAMERA_YAW_RANGE),
    )


def landmark_loss_grad(pred2d: np.ndarray, gt: LandmarkSet2D) -> np.ndarray:
    """(55, 2) gradient with respect to the predicted landmark positions."""
    pred2d = np.asarray(pred2d, dtype=float)
    diag = float(np.linalg.norm(np.ptp(gt.points, axis=0)))
    diff = pred2d - gt.points
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    unit = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
    return unit / (N_LANDMARKS * diag)


def reg_loss_grad(beta: np.ndarray, theta: np.ndarray):
    beta = np.asarray(beta, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    return np.sign(beta) / beta.size, np.sign(theta) / theta.size


def similarity_loss_grad(betas: np.ndarray) -> np.ndarray:
    """(bs, d) gradient of the mean pairwise cosine similarity."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    bs = len(betas)
    norms = np.linalg.norm(betas, axis=1, keepdims=True)
    unit = betas / norms
    gram = unit @ unit.T
    sum_units = unit.sum(axis=0, keepdims=True) - unit
    sum_cos = gram.sum(axis=1, keepdims=True) - 1.0
    # each unordered pair appears twice in the ordered-pair sum
    return 2.0 * (sum_units - sum_cos * unit) / (norms * bs * (bs - 1))


def smooth_loss_grad(mesh: TriMesh) -> np.ndarray:
    """(n, 3) gradient of the mean uniform-Laplacian norm w.r.t. vertices."""
    lap = uniform_laplacian(mesh)
    norms = np.linalg.norm(lap, axis=1, keepdims=True)
    unit = np.divide(lap, norms, out=np.zeros_like(lap), where=norms > 0)
    offsets, nbrs = vertex_adjacency(mesh)
    deg = np.diff(offsets)
    owner = np.repeat(np.arange(mesh.n_vertices), deg)
    # transpose of (neighbour mean - identity): scatter u_i / deg_i to neighbours
    out = -unit.copy()
    np.add.at(out, nbrs, unit[owner] / deg[owner, None])
    return out / mesh.n_vertices


# ---------------------------------------------------------------------------
# chamfer / contour


def chamfer_grad_first(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of chamfer_distance(a, b) with respect to the points of `a`.

    Nearest-neighbour assignments are treated as locally constant.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    grad = np.zeros_like(a)
    d_ab, nn_ab = cKDTree(b).query(a)
    diff = a - b[nn_ab]
    unit = np.divide(diff, d_ab[:, None], out=np.zeros_like(diff), where=d_ab[:, None] > 0)
    grad += 0.5 * unit / len(a)
    d_ba, nn_ba = cKDTree(a).query(b)
    diff = a[nn_ba] - b
    unit = np.divide(diff, d_ba[:, None], out=np.zeros_like(diff), where=d_ba[:, None] > 0)
    np.add.at(grad, nn_ba, 0.5 * unit / len(b))
    return grad


def _resample_internals(points: np.ndarray, n: int):
    seg = np.diff(points, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    total = lengths.sum()
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    alpha = np.linspace(0.0, 1.0, n)
    s = alpha * total
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
    t = (s - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1.0)
    return seg, lengths, total, alpha, idx, t


def resample_polyline_backprop(
    points: np.ndarray, n: int, grad_samples: np.ndarray
) -> np.ndarray:
    """Pull a gradient on the resampled points back onto the polyline vertices.

    Accounts for both the direct dependence of each sample on its segment
    endpoints and the motion of the arclength parameterization as the
    vertices move.
    """
    points = np.asarray(points, dtype=float)
    grad_samples = np.asarray(grad_samples, dtype=float)
    m = len(points)
    grad = np.zeros_like(points)
    seg, lengths, total, alpha, idx, t = _resample_internals(points, n)
    if total == 0.0:
        grad[0] = grad_samples.sum(axis=0)
        return grad

    # direct endpoint weights: p_k = (1 - t_k) q_j + t_k q_{j+1}
    np.add.at(grad, idx, (1.0 - t)[:, None] * grad_samples)
    np.add.at(grad, idx + 1, t[:, None] * grad_samples)

    # arclength coupling: dt_k/dL_l = (alpha_k - [l < j_k] - t_k [l == j_k]) / L_{j_k}
    dl_dt = np.einsum("kd,kd->k", grad_samples, seg[idx])
    safe_len = np.where(lengths[idx] > 0, lengths[idx], np.inf)
    u = dl_dt / safe_len
    s1 = float((u * alpha).sum())
    per_seg_u = np.bincount(idx, weights=u, minlength=m - 1)
    suffix = np.concatenate([np.cumsum(per_seg_u[::-1])[::-1][1:], [0.0]])
    per_seg_ut = np.bincount(idx, weights=u * t, minlength=m - 1)
    coeff = s1 - suffix - per_seg_ut  # d loss / d L_l
    unit_seg = np.divide(
        seg, lengths[:, None], out=np.zeros_like(seg), where=lengths[:, None] > 0
    )
    grad[:-1] -= coeff[:, None] * unit_seg
    grad[1:] += coeff[:, None] * unit_seg
    return grad


def contour_loss_grad(
    pred: LandmarkSet2D, gt: LandmarkSet2D, samples_per_contour: int
) -> np.ndarray:
    """(55, 2) gradient of the contour loss w.r.t. predicted landmarks."""
    grad = np.zeros((N_LANDMARKS, 2))
    for g in gt.groups:
        p = resample_polyline(pred.points[g], samples_per_contour)
        q = resample_polyline(gt.points[g], samples_per_contour)
        g_samples = chamfer_grad_first(p, q) / 4.0
        grad[g] += resample_polyline_backprop(pred.points[g], samples_per_contour, g_samples)
    return grad


# ---------------------------------------------------------------------------
# projection / decode chains


def project_orthographic_backprop(points: np.ndarray, cam: CameraParams, grad2d: np.ndarray):
    """Pull back a gradient on projected 2D points.

    Returns (grad_points (n, 3), grad_scale, grad_angles (3,),
    grad_translation (2,)).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grad2d = np.asarray(grad2d, dtype=float)
    r = rotation_matrix(cam.rotation)
    dr = rotation_matrix_derivatives(cam.rotation)
    rotated = points @ r.T
    grad_scale = float(np.einsum("nd,nd->", grad2d, rotated[:, :2]))
    grad_angles = np.array(
        [
            cam.scale * np.einsum("nd,nd->", grad2d, (points @ dr[a].T)[:, :2])
            for a in range(3)
        ]
    )
    grad_translation = grad2d.sum(axis=0)
    grad_points = cam.scale * grad2d @ r[:2, :]
    return grad_points, grad_scale, grad_angles, grad_translation


def decode_shape_backprop(model, grad_vertices: np.ndarray) -> np.ndarray:
    """Pull back a gradient on decoded vertices to the shape latent code."""
    flat = np.asarray(grad_vertices, dtype=float).ravel()
    return model.eigenvalues * (model.eigenvectors.T @ flat)


def landmark_positions_backprop(model, grad_lm3d: np.ndarray) -> np.ndarray:
    """Pull back a gradient on the 55 landmark anchor positions to vertices."""
    grad_v = np.zeros((model.n_vertices, 3))
    emb = model.landmarks
    corners = model.faces[emb.faces]  # (55, 3) vertex ids
    contrib = emb.bary[:, :, None] * np.asarray(grad_lm3d, dtype=float)[:, None, :]
    np.add.at(grad_v, corners.ravel(), contrib.reshape(-1, 3))
    return grad_v
