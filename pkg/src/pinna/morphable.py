"""Linear PCA shape/texture models: decoding, UV transfer, latent sampling.

Model files are an .npz container plus a .json sidecar carrying dimensions
and provenance. The proprietary source models cannot be shipped, so the
package generates a small synthetic stand-in (50 vertices, 8 components,
PCA over procedurally deformed ellipsoids) that exercises every code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .meshes import TriMesh, _points_to_mesh, _readonly
from .primitives import make_uv_sphere

REFERENCE_SHAPE_DIM = 236
REFERENCE_TEXTURE_DIM = 50
N_LANDMARKS = 55


class ModelFormatError(ValueError):
    """Model container violates the documented schema."""


@dataclass(frozen=True)
class LandmarkEmbedding:
    """55 surface anchors: barycentric points on model faces, in 4 contours.

    `groups` are ordered index sequences into the 55 anchors; together they
    partition 0..54. Group 0 is the outer contour by convention.
    """

    faces: np.ndarray  # (55,)
    bary: np.ndarray  # (55, 3)
    groups: tuple

    def __post_init__(self):
        f = np.asarray(self.faces, dtype=np.int64)
        b = np.asarray(self.bary, dtype=np.float64)
        groups = tuple(np.asarray(g, dtype=np.int64) for g in self.groups)
        if f.shape != (N_LANDMARKS,) or b.shape != (N_LANDMARKS, 3):
            raise ModelFormatError("landmark embedding must have 55 anchors")
        flat = np.concatenate(groups)
        if len(groups) != 4 or sorted(flat.tolist()) != list(range(N_LANDMARKS)):
            raise ModelFormatError("landmark groups must partition 0..54 into 4 contours")
        object.__setattr__(self, "faces", _readonly(f))
        object.__setattr__(self, "bary", _readonly(b))
        object.__setattr__(self, "groups", groups)


@dataclass(frozen=True)
class EarShapeModel:
    """PCA shape model: decoded vertices = mean + U @ (scales * beta).

    mean_shape: (3n,) mm; eigenvectors: (3n, d); eigenvalues: (d,) positive
    per-component scales applied to the latent code; faces: shared topology.
    """

    mean_shape: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    faces: np.ndarray
    uv: Optional[np.ndarray] = None
    landmarks: Optional[LandmarkEmbedding] = None

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).ravel()
        evec = np.asarray(self.eigenvectors, dtype=np.float64)
        eval_ = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        faces = np.asarray(self.faces, dtype=np.int64)
        if mean.size % 3 != 0:
            raise ModelFormatError("mean_shape length must be 3 * n_vertices")
        if evec.shape != (mean.size, eval_.size):
            raise ModelFormatError(
                f"eigenvectors must be ({mean.size}, {eval_.size}), got {evec.shape}"
            )
        if (eval_ <= 0).any():
            raise ModelFormatError("eigenvalues must all be positive")
        object.__setattr__(self, "mean_shape", _readonly(mean))
        object.__setattr__(self, "eigenvectors", _readonly(evec))
        object.__setattr__(self, "eigenvalues", _readonly(eval_))
        object.__setattr__(self, "faces", _readonly(faces))
        if self.uv is not None:
            object.__setattr__(self, "uv", _readonly(np.asarray(self.uv, dtype=np.float64)))
        # decoding the mean validates topology/areas once up front
        TriMesh(mean.reshape(-1, 3), faces, self.uv)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size


@dataclass(frozen=True)
class TextureModel:
    """Linear texture space: decoded map = clip(mean + sum theta_i * basis_i)."""

    mean_texture: np.ndarray  # (h, w, 3) in [0, 1]
    basis: np.ndarray  # (d, h, w, 3)

    def __post_init__(self):
        mean = np.asarray(self.mean_texture, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        if mean.ndim != 3 or mean.shape[2] != 3:
            raise ModelFormatError(f"mean_texture must be (h, w, 3), got {mean.shape}")
        if basis.ndim != 4 or basis.shape[1:] != mean.shape:
            raise ModelFormatError(
                f"basis must be (d, {mean.shape[0]}, {mean.shape[1]}, 3), got {basis.shape}"
            )
        if mean.min() < 0.0 or mean.max() > 1.0:
            raise ModelFormatError("mean_texture values must lie in [0, 1]")
        object.__setattr__(self, "mean_texture", _readonly(mean))
        object.__setattr__(self, "basis", _readonly(basis))

    @property
    def n_components(self) -> int:
        return len(self.basis)


@dataclass(frozen=True)
class LatentCode:
    shape: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.shape, dtype=np.float64).ravel()
        t = np.asarray(self.texture, dtype=np.float64).ravel()
        if not (np.isfinite(s).all() and np.isfinite(t).all()):
            raise ValueError("latent codes must be finite")
        object.__setattr__(self, "shape", _readonly(s))
        object.__setattr__(self, "texture", _readonly(t))


# ---------------------------------------------------------------------------
# decoding


def decode_vertices(model: EarShapeModel, beta: np.ndarray) -> np.ndarray:
    """Decoded vertex positions (n, 3) without TriMesh construction."""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if beta.size != model.n_components:
        raise ValueError(
            f"beta has {beta.size} components, model expects {model.n_components}"
        )
    flat = model.mean_shape + model.eigenvectors @ (model.eigenvalues * beta)
    return flat.reshape(-1, 3)


def decode_shape(model: EarShapeModel, beta: np.ndarray) -> TriMesh:
    """Decode a latent code into a mesh with the model's shared topology."""
    return TriMesh(decode_vertices(model, beta), model.faces, model.uv)


def decode_texture(model: TextureModel, theta: np.ndarray) -> np.ndarray:
    """Decoded (h, w, 3) texture map, clamped to [0, 1]."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.size != model.n_components:
        raise ValueError(
            f"theta has {theta.size} components, model expects {model.n_components}"
        )
    tex = model.mean_texture + np.tensordot(theta, model.basis, axes=1)
    return np.clip(tex, 0.0, 1.0)


def landmark_positions(model: EarShapeModel, vertices: np.ndarray) -> np.ndarray:
    """3D positions of the 55 landmark anchors on the given decoded vertices."""
    if model.landmarks is None:
        raise ValueError("shape model carries no landmark embedding")
    tri = vertices[model.faces[model.landmarks.faces]]
    return np.einsum("nk,nkd->nd", model.landmarks.bary, tri)


# ---------------------------------------------------------------------------
# UV transfer


def transfer_uv(
    target_vertices: np.ndarray, donor: TriMesh, k: int = 3, exact_eps: float = 1e-9
) -> np.ndarray:
    """Per-vertex UVs from the k nearest donor vertices.

    Weights are normalized inverse distances, so the nearest donor
    dominates; a target within `exact_eps` of a donor vertex copies that
    donor's UV verbatim. Caller is responsible for aligning the two
    geometries beforehand.
    """
    if donor.uv is None:
        raise ValueError("donor mesh has no uv")
    target = np.atleast_2d(np.asarray(target_vertices, dtype=np.float64))
    if k > donor.n_vertices or k < 1:
        raise ValueError(f"k={k} invalid for donor with {donor.n_vertices} vertices")
    out = np.empty((len(target), 2))
    # chunked full distance matrix; donor meshes are a few thousand vertices
    chunk = max(1, 2_000_000 // donor.n_vertices)
    for lo in range(0, len(target), chunk):
        hi = min(lo + chunk, len(target))
        d = np.linalg.norm(target[lo:hi, None, :] - donor.vertices[None], axis=2)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        rows = np.arange(hi - lo)[:, None]
        dk = d[rows, order]
        uvk = donor.uv[order]
        exact = dk[:, 0] < exact_eps
        w = 1.0 / np.maximum(dk, 1e-300)
        w /= w.sum(axis=1, keepdims=True)
        blended = np.einsum("nk,nkd->nd", w, uvk)
        out[lo:hi] = np.where(exact[:, None], uvk[:, 0, :], blended)
    return out


# ---------------------------------------------------------------------------
# latent sampling


def sample_latents(
    seed: int,
    count: int,
    shape_sigma: float = 1.0,
    texture_sigma: float = 1.0,
    shape_dim: int = REFERENCE_SHAPE_DIM,
    texture_dim: int = REFERENCE_TEXTURE_DIM,
) -> list[LatentCode]:
    """i.i.d. zero-mean Gaussian latent codes.

    Deterministic per seed: one PCG64 stream draws the (count, shape_dim)
    shape block, then the (count, texture_dim) texture block.
    """
    if shape_sigma <= 0 or texture_sigma <= 0:
        raise ValueError("sigmas must be positive")
    rng = np.random.default_rng(seed)
    shapes = rng.normal(0.0, shape_sigma, size=(count, shape_dim))
    textures = rng.normal(0.0, texture_sigma, size=(count, texture_dim))
    return [LatentCode(shapes[i], textures[i]) for i in range(count)]


# ---------------------------------------------------------------------------
# container I/O


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_shape_model(model: EarShapeModel, path, provenance: str = "") -> None:
    """Write <path>.npz-style container plus a .json sidecar."""
    path = Path(path)
    arrays = {
        "mean_shape": model.mean_shape,
        "eigenvectors": model.eigenvectors,
        "eigenvalues": model.eigenvalues,
        "faces": model.faces,
    }
    if model.uv is not None:
        arrays["uv"] = model.uv
    if model.landmarks is not None:
        arrays["landmark_faces"] = model.landmarks.faces
        arrays["landmark_bary"] = model.landmarks.bary
        for i, g in enumerate(model.landmarks.groups):
            arrays[f"landmark_group_{i}"] = g
    np.savez(path, **arrays)
    sidecar = {
        "schema": "pinna-shape-model/1",
        "n_vertices": model.n_vertices,
        "n_components": model.n_components,
        "n_faces": int(len(model.faces)),
        "has_uv": model.uv is not None,
        "has_landmarks": model.landmarks is not None,
        "units": "mm",
        "provenance": provenance,
    }
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_shape_model(path) -> EarShapeModel:
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(".npz")
    try:
        data = np.load(path)
    except Exception as exc:
        raise ModelFormatError(f"{path}: cannot read model container: {exc}") from exc
    for key in ("mean_shape", "eigenvectors", "eigenvalues", "faces"):
        if key not in data:
            raise ModelFormatError(f"{path}: container missing array {key!r}")
    landmarks = None
    if "landmark_faces" in data:
        landmarks = LandmarkEmbedding(
            faces=data["landmark_faces"],
            bary=data["landmark_bary"],
            groups=tuple(data[f"landmark_group_{i}"] for i in range(4)),
        )
    sidecar_path = _sidecar(path)
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        if meta.get("n_components") is not None and meta["n_components"] != len(
            data["eigenvalues"]
        ):
            raise ModelFormatError(
                f"{path}: sidecar n_components={meta['n_components']} disagrees with "
                f"container ({len(data['eigenvalues'])})"
            )
    return EarShapeModel(
        mean_shape=data["mean_shape"],
        eigenvectors=data["eigenvectors"],
        eigenvalues=data["eigenvalues"],
        faces=data["faces"],
        uv=data["uv"] if "uv" in data else None,
        landmarks=landmarks,
    )


def save_texture_model(model: TextureModel, path, provenance: str = "") -> None:
    path = Path(path)
    np.savez(path, mean_texture=model.mean_texture, basis=model.basis)
    sidecar = {
        "schema": "pinna-texture-model/1",
        "resolution": list(model.mean_texture.shape[:2]),
        "n_components": model.n_components,
        "provenance": provenance,
    }
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_texture_model(path) -> TextureModel:
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(".npz")
    try:
        data = np.load(path)
    except Exception as exc:
        raise ModelFormatError(f"{path}: cannot read model container: {exc}") from exc
    for key in ("mean_texture", "basis"):
        if key not in data:
            raise ModelFormatError(f"{path}: container missing array {key!r}")
    return TextureModel(mean_texture=data["mean_texture"], basis=data["basis"])


# ---------------------------------------------------------------------------
# synthetic stand-in models


def _ellipsoid_base() -> TriMesh:
    """50-vertex ear-sized ellipsoid (semi-axes 10 x 30 x 20 mm)."""
    sphere = make_uv_sphere(radius=1.0, rings=7, segments=8)
    axes = np.array([10.0, 30.0, 20.0])
    u = 0.5 + np.arctan2(sphere.vertices[:, 2], sphere.vertices[:, 0]) / (2 * np.pi)
    v = 0.5 + np.arcsin(np.clip(sphere.vertices[:, 1], -1, 1)) / np.pi
    return TriMesh(sphere.vertices * axes, sphere.faces, np.stack([u, v], axis=1))


def _bump_field(points: np.ndarray, rng: np.random.Generator, n_bumps: int = 6):
    """Smooth random displacement field: sum of Gaussian bumps."""
    scale = np.ptp(points, axis=0).max()
    centers = points[rng.integers(0, len(points), size=n_bumps)]
    widths = rng.uniform(0.25, 0.6, size=n_bumps) * scale
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.normal(0.0, 1.5, size=n_bumps)
    disp = np.zeros_like(points)
    for c, w, d, a in zip(centers, widths, dirs, amps):
        g = np.exp(-np.sum((points - c) ** 2, axis=1) / (2 * w * w))
        disp += a * g[:, None] * d
    return disp


def build_standin_shape_model(
    seed: int = 0, n_components: int = 8, n_training: int = 60
) -> EarShapeModel:
    """PCA over procedurally deformed ellipsoids; 50 vertices, 96 faces.

    Small enough for fast tests while exercising the same contracts as a
    full-resolution model.
    """
    base = _ellipsoid_base()
    rng = np.random.default_rng(seed)
    samples = np.empty((n_training, base.n_vertices * 3))
    for i in range(n_training):
        samples[i] = (base.vertices + _bump_field(base.vertices, rng)).ravel()
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    scales = svals[:n_components] / np.sqrt(n_training - 1)
    eigenvectors = vt[:n_components].T
    landmarks = _standin_landmarks(TriMesh(mean.reshape(-1, 3), base.faces))
    return EarShapeModel(
        mean_shape=mean,
        eigenvectors=eigenvectors,
        eigenvalues=np.maximum(scales, 1e-6),
        faces=base.faces,
        uv=base.uv,
        landmarks=landmarks,
    )


def _standin_landmarks(mean_mesh: TriMesh) -> LandmarkEmbedding:
    """Four latitude-band contours (20/15/12/8 anchors) on the mean surface."""
    sizes = (20, 15, 12, 8)
    extent = mean_mesh.vertices.max(axis=0) - mean_mesh.vertices.min(axis=0)
    center = 0.5 * (mean_mesh.vertices.max(axis=0) + mean_mesh.vertices.min(axis=0))
    semi = extent / 2.0
    polar = (0.30, 0.45, 0.60, 0.75)  # fraction of pi from the +y pole
    targets = []
    for band, size in enumerate(sizes):
        phi = np.pi * polar[band]
        # stop short of a full turn so contours stay open polylines
        thetas = np.linspace(0.0, 1.7 * np.pi, size)
        for th in thetas:
            direction = np.array(
                [np.sin(phi) * np.cos(th), np.cos(phi), np.sin(phi) * np.sin(th)]
            )
            targets.append(center + semi * direction)
    _, fidx, bary = _points_to_mesh(np.asarray(targets), mean_mesh)
    bounds = np.cumsum((0,) + sizes)
    groups = tuple(np.arange(bounds[i], bounds[i + 1]) for i in range(4))
    return LandmarkEmbedding(faces=fidx, bary=bary, groups=groups)


def build_standin_texture_model(
    seed: int = 0, size: int = 32, n_components: int = 6
) -> TextureModel:
    """Low-frequency synthetic texture space with `n_components` basis maps."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    mean = np.stack(
        [0.65 + 0.1 * xx, 0.45 + 0.1 * yy, 0.40 + 0.05 * (xx + yy)], axis=2
    )
    basis = np.empty((n_components, size, size, 3))
    for i in range(n_components):
        fx, fy = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        for ch in range(3):
            basis[i, :, :, ch] = 0.08 * np.cos(
                2 * np.pi * (fx * xx + fy * yy) + phase[ch]
            )
    return TextureModel(mean_texture=np.clip(mean, 0, 1), basis=basis)
