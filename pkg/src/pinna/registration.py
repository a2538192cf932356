"""Three-stage gradient registration of a mesh (or shape model) to a scan.

Stage 1 aligns four paired key points, stage 2 minimizes the chamfer
distance between surface samples and the subsampled scan, stage 3
minimizes the scan-to-mesh distance directly. Adam drives all three
stages; the learning rate is multiplied by a decay factor at each stage
boundary. In shape mode the latent code joins the rigid parameters in
stages 2 and 3.

The optimized map sends mesh space to scan space: p -> s * R(angles) p + t
with s kept positive via a log parameterization.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .meshes import (
    PointCloud,
    TriMesh,
    _points_to_mesh,
    downsample_random,
    reflect_sagittal,
    sample_points_on_mesh,
    scan_to_mesh,
)
from .morphable import EarShapeModel, decode_vertices
from .optim import adam_init, adam_step
from .transforms import SimilarityTransform, rotation_matrix, rotation_matrix_derivatives


class RegistrationError(RuntimeError):
    """Registration diverged; message carries the stage and iteration."""


@dataclass(frozen=True)
class RegistrationConfig:
    mode: str = "rigid_scale"  # or "rigid_scale_shape"
    stage_iterations: int = 166
    initial_lr: float = 0.45
    lr_decay_per_stage: float = 0.1
    scan_subsample: int = 1000
    surface_samples: int = 1000
    mesh_key_vertices: tuple = (0, 13, 25, 37)
    scan_key_indices: Optional[tuple] = None  # None = auto-pick by extremes
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in ("rigid_scale", "rigid_scale_shape"):
            raise ValueError(f"unknown registration mode {self.mode!r}")
        if self.stage_iterations < 1:
            raise ValueError("stage_iterations must be >= 1")
        if not 0.0 < self.lr_decay_per_stage <= 1.0:
            raise ValueError("lr_decay_per_stage must lie in (0, 1]")
        if self.scan_subsample < 4:
            raise ValueError("scan_subsample must be >= 4")
        if len(self.mesh_key_vertices) != 4:
            raise ValueError("exactly 4 mesh key vertices are required")
        if self.scan_key_indices is not None and len(self.scan_key_indices) != 4:
            raise ValueError("exactly 4 scan key indices are required when given")


@dataclass(frozen=True)
class RegistrationResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    beta: Optional[np.ndarray]
    stage_traces: tuple  # one loss array per stage
    final_s2m: float

    def transform(self) -> SimilarityTransform:
        return SimilarityTransform(self.scale, self.rotation, self.translation)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "beta": None if self.beta is None else self.beta.tolist(),
            "final_s2m_mm": self.final_s2m,
            "stage_final_losses": [float(t[-1]) for t in self.stage_traces],
        }


def _auto_scan_key_points(scan: PointCloud, base_vertices, key_idx) -> np.ndarray:
    """Scan extremes along the directions of the mesh key points.

    Heuristic stand-in for manually picked correspondences: for each mesh
    key point, take the scan point farthest along the centroid-to-key
    direction.
    """
    centroid = base_vertices.mean(axis=0)
    scan_centroid = scan.points.mean(axis=0)
    picks = []
    for vi in key_idx:
        d = base_vertices[vi] - centroid
        norm = np.linalg.norm(d)
        if norm == 0:
            raise RegistrationError(f"mesh key vertex {vi} coincides with the centroid")
        d = d / norm
        picks.append(scan.points[np.argmax((scan.points - scan_centroid) @ d)])
    return np.asarray(picks)


class _RegistrationProblem:
    def __init__(self, mesh_or_model, scan: PointCloud, config: RegistrationConfig):
        self.config = config
        self.scan = scan
        if isinstance(mesh_or_model, EarShapeModel):
            self.model = mesh_or_model
            self.base_faces = mesh_or_model.faces
            self.with_shape = config.mode == "rigid_scale_shape"
            self.n_beta = mesh_or_model.n_components if self.with_shape else 0
        elif isinstance(mesh_or_model, TriMesh):
            if config.mode == "rigid_scale_shape":
                raise ValueError("shape mode needs an EarShapeModel, got a TriMesh")
            self.model = None
            self.base_mesh = mesh_or_model
            self.base_faces = mesh_or_model.faces
            self.with_shape = False
            self.n_beta = 0
        else:
            raise TypeError(f"expected TriMesh or EarShapeModel, got {type(mesh_or_model)!r}")
        # params: [log_scale, ax, ay, az, tx, ty, tz, beta...]
        self.n_params = 7 + self.n_beta

    def base_vertices(self, params: np.ndarray) -> np.ndarray:
        if self.model is not None:
            beta = params[7:] if self.with_shape else np.zeros(self.model.n_components)
            return decode_vertices(self.model, beta)
        return self.base_mesh.vertices

    def transformed_mesh(self, params: np.ndarray) -> TriMesh:
        v = self.base_vertices(params)
        s = np.exp(params[0])
        r = rotation_matrix(params[1:4])
        return TriMesh(s * v @ r.T + params[4:7], self.base_faces)

    def chain_vertex_grad(self, params, base_verts, grad_y, vertex_ids=None):
        """Pull a gradient on transformed points y = s R v + t back to params.

        grad_y rows pair with base_verts rows (a subset of vertices when
        vertex_ids is given, used to scatter into the latent chain).
        """
        s = np.exp(params[0])
        r = rotation_matrix(params[1:4])
        dr = rotation_matrix_derivatives(params[1:4])
        g = np.zeros(self.n_params)
        rv = base_verts @ r.T
        g[0] = s * np.einsum("nd,nd->", grad_y, rv)  # d/d log s
        for a in range(3):
            g[1 + a] = s * np.einsum("nd,nd->", grad_y, base_verts @ dr[a].T)
        g[4:7] = grad_y.sum(axis=0)
        if self.with_shape:
            if vertex_ids is None:
                raise ValueError("shape mode needs vertex ids for the latent chain")
            grad_v = s * grad_y @ r
            full = np.zeros((self.model.n_vertices, 3))
            np.add.at(full, vertex_ids, grad_v)
            g[7:] = self.model.eigenvalues * (
                self.model.eigenvectors.T @ full.ravel()
            )
        return g


def register(mesh_or_model, scan: PointCloud, config: RegistrationConfig) -> RegistrationResult:
    """Three-stage similarity (+ optional shape) registration onto a scan."""
    if len(scan) < 4:
        raise ValueError("scan must have at least 4 points")
    prob = _RegistrationProblem(mesh_or_model, scan, config)
    cfg = config
    rng = np.random.default_rng(cfg.seed)

    base0 = prob.base_vertices(np.zeros(prob.n_params))
    key_idx = np.asarray(cfg.mesh_key_vertices, dtype=int)
    if key_idx.min() < 0 or key_idx.max() >= len(base0):
        raise RegistrationError(
            f"mesh key vertex index out of range [0, {len(base0)}): {key_idx.tolist()}"
        )
    if cfg.scan_key_indices is not None:
        scan_keys = np.asarray(cfg.scan_key_indices, dtype=int)
        if scan_keys.min() < 0 or scan_keys.max() >= len(scan):
            raise RegistrationError(
                f"scan key index out of range [0, {len(scan)}): {scan_keys.tolist()}"
            )
        key_targets = scan.points[scan_keys]
    else:
        key_targets = _auto_scan_key_points(scan, base0, key_idx)

    params = np.zeros(prob.n_params)
    params[4:7] = scan.points.mean(axis=0) - base0.mean(axis=0)

    sub = (
        downsample_random(scan, cfg.scan_subsample, cfg.seed)
        if len(scan) > cfg.scan_subsample
        else scan
    )
    sub_tree = cKDTree(sub.points)

    traces = []
    for stage in (1, 2, 3):
        lr = cfg.initial_lr * cfg.lr_decay_per_stage ** (stage - 1)
        shape_active = prob.with_shape and stage >= 2
        active = np.ones(prob.n_params, dtype=bool)
        if prob.with_shape and not shape_active:
            active[7:] = False
        state = adam_init(int(active.sum()))
        trace = np.empty(cfg.stage_iterations)
        for it in range(cfg.stage_iterations):
            base = prob.base_vertices(params)
            if stage == 1:
                value, grad = _stage1(prob, params, base, key_idx, key_targets)
            elif stage == 2:
                value, grad = _stage2(prob, params, base, sub, sub_tree, rng)
            else:
                value, grad = _stage3(prob, params, base, sub)
            trace[it] = value
            if not np.isfinite(value):
                raise RegistrationError(
                    f"loss became non-finite at stage {stage}, iteration {it}"
                )
            params_active, state = adam_step(
                params[active], grad[active], state, lr,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
            params = params.copy()
            params[active] = params_active
        traces.append(trace)

    final_mesh = prob.transformed_mesh(params)
    final_s2m = scan_to_mesh(scan, final_mesh)
    return RegistrationResult(
        scale=float(np.exp(params[0])),
        rotation=params[1:4].copy(),
        translation=params[4:7].copy(),
        beta=params[7:].copy() if prob.with_shape else None,
        stage_traces=tuple(traces),
        final_s2m=final_s2m,
    )


def _transform_points(params, points):
    s = np.exp(params[0])
    return s * points @ rotation_matrix(params[1:4]).T + params[4:7]


def _stage1(prob, params, base, key_idx, key_targets):
    """Mean squared distance between the four paired key points."""
    y = _transform_points(params, base[key_idx])
    diff = y - key_targets
    value = float(np.einsum("nd,nd->", diff, diff) / len(key_idx))
    grad_y = 2.0 * diff / len(key_idx)
    return value, prob.chain_vertex_grad(params, base[key_idx], grad_y, vertex_ids=key_idx)


def _stage2(prob, params, base, sub, sub_tree, rng):
    """Symmetric chamfer between fresh surface samples and the subsampled scan."""
    mesh = TriMesh(base, prob.base_faces)
    pts, fidx, bary = sample_points_on_mesh(mesh, prob.config.surface_samples, rng)
    y = _transform_points(params, pts)

    d_ab, nn_ab = sub_tree.query(y)
    d_ba, nn_ba = cKDTree(y).query(sub.points)
    value = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))

    grad_y = 0.5 / len(y) * np.divide(
        y - sub.points[nn_ab], d_ab[:, None], out=np.zeros_like(y), where=d_ab[:, None] > 0
    )
    back = np.divide(
        y[nn_ba] - sub.points, d_ba[:, None],
        out=np.zeros_like(sub.points), where=d_ba[:, None] > 0,
    )
    np.add.at(grad_y, nn_ba, 0.5 / len(sub.points) * back)

    corners = prob.base_faces[fidx]  # (k, 3) vertex ids
    grad_flat = (bary[:, :, None] * grad_y[:, None, :]).reshape(-1, 3)
    sample_verts = base[corners].reshape(-1, 3)
    return value, prob.chain_vertex_grad(
        params, sample_verts, grad_flat, vertex_ids=corners.ravel()
    )


def _stage3(prob, params, base, sub):
    """Scan-to-mesh distance of the subsampled scan to the transformed mesh."""
    mesh = prob.transformed_mesh(params)
    dist, fidx, bary = _points_to_mesh(sub.points, mesh)
    value = float(dist.mean())
    # closest point q = sum_k bary_k * y_k; d|p - q|/dq = -(p - q)/|p - q|
    q = np.einsum("nk,nkd->nd", bary, mesh.vertices[prob.base_faces[fidx]])
    diff = q - sub.points
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    grad_q = unit / len(sub.points)
    corners = prob.base_faces[fidx]
    grad_flat = (bary[:, :, None] * grad_q[:, None, :]).reshape(-1, 3)
    sample_verts = base[corners].reshape(-1, 3)
    return value, prob.chain_vertex_grad(
        params, sample_verts, grad_flat, vertex_ids=corners.ravel()
    )


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass(frozen=True)
class EvaluationRow:
    sample_id: str
    laterality: str
    s2m_mm: float
    converged: bool


@dataclass(frozen=True)
class EvaluationReport:
    rows: tuple
    mean_s2m_mm: float
    median_s2m_mm: float

    def to_dict(self) -> dict:
        return {
            "mean_s2m_mm": self.mean_s2m_mm,
            "median_s2m_mm": self.median_s2m_mm,
            "samples": [
                {
                    "id": r.sample_id,
                    "laterality": r.laterality,
                    "s2m_mm": r.s2m_mm,
                    "converged": r.converged,
                }
                for r in self.rows
            ],
        }


def evaluate_dataset(
    predictions: Sequence[TriMesh],
    scans: Sequence[PointCloud],
    lateralities: Sequence[str],
    config: RegistrationConfig,
    sample_ids: Optional[Sequence[str]] = None,
) -> EvaluationReport:
    """Register every prediction to its scan and report S2M statistics.

    Left-ear scans are reflected through the sagittal plane first so that
    everything is evaluated in the right-ear canonical frame.
    """
    if not (len(predictions) == len(scans) == len(lateralities)):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions, {len(scans)} scans, "
            f"{len(lateralities)} laterality flags"
        )
    if sample_ids is None:
        sample_ids = [f"sample_{i:04d}" for i in range(len(scans))]
    rows = []
    for sid, pred, scan, lat in zip(sample_ids, predictions, scans, lateralities):
        if lat not in ("left", "right"):
            raise ValueError(f"{sid}: laterality must be 'left' or 'right', got {lat!r}")
        oriented = reflect_sagittal(scan) if lat == "left" else scan
        result = register(pred, oriented, config)
        # converged = final stage ended at least as low as it started
        trace = result.stage_traces[-1]
        rows.append(
            EvaluationRow(
                sample_id=str(sid),
                laterality=lat,
                s2m_mm=result.final_s2m,
                converged=bool(trace[-1] <= trace[0]),
            )
        )
    values = np.array([r.s2m_mm for r in rows])
    return EvaluationReport(
        rows=tuple(rows),
        mean_s2m_mm=float(values.mean()),
        median_s2m_mm=float(np.median(values)),
    )


def write_report_csv(report: EvaluationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "laterality", "s2m_mm", "converged"])
        for r in report.rows:
            writer.writerow([r.sample_id, r.laterality, f"{r.s2m_mm:.9g}", r.converged])


def write_report_json(report: EvaluationReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
