"""Triangle meshes, point clouds, and the geometric primitives built on them.

All geometry is in millimeters in the canonical frame (x left->right,
y down->up, z back->front). Every operation here is a pure function over
immutable inputs; the arrays inside `TriMesh`/`PointCloud` are marked
read-only on construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_AREA_MM2 = 1e-12


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TriMesh:
    """Triangulated surface.

    vertices: (n, 3) float positions in mm.
    faces: (m, 3) int vertex indices.
    uv: optional (n, 2) per-vertex texture coordinates in [0, 1]^2.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (m, 3), got {f.shape}")
        if len(f) == 0:
            raise MeshError("mesh has no faces")
        if not np.isfinite(v).all():
            raise MeshError("vertices contain non-finite values")
        if f.min() < 0 or f.max() >= len(v):
            bad = int(np.flatnonzero((f < 0) | (f >= len(v)))[0] // 3)
            raise MeshError(
                f"face {bad} references vertex index out of range [0, {len(v)})"
            )
        areas = _face_areas(v, f)
        if (areas <= DEGENERATE_AREA_MM2).any():
            bad = int(np.argmin(areas))
            raise MeshError(
                f"face {bad} is degenerate (area {areas[bad]:.3e} mm^2 <= "
                f"{DEGENERATE_AREA_MM2:.0e})"
            )
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))
        if self.uv is not None:
            uv = np.asarray(self.uv, dtype=np.float64)
            if uv.shape != (len(v), 2):
                raise MeshError(
                    f"uv must have one (u, v) entry per vertex, got {uv.shape}"
                )
            object.__setattr__(self, "uv", _readonly(uv))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology and uv, new vertex positions."""
        return TriMesh(vertices, self.faces, self.uv)


@dataclass(frozen=True)
class PointCloud:
    """Scan-style point set: points (n, 3) mm, optional per-point RGB in [0, 1]."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise MeshError(f"points must be (n, 3), got {p.shape}")
        if len(p) == 0:
            raise MeshError("point cloud is empty")
        if not np.isfinite(p).all():
            raise MeshError("points contain non-finite values")
        object.__setattr__(self, "points", _readonly(p))
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != (len(p), 3):
                raise MeshError(f"colors must be (n, 3), got {c.shape}")
            object.__setattr__(self, "colors", _readonly(c))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class MeshQualityReport:
    min_angle: float  # degrees
    max_angle: float  # degrees
    sliver_count: int
    boundary_edge_count: int


# ---------------------------------------------------------------------------
# basic per-face quantities


def _face_corners(vertices: np.ndarray, faces: np.ndarray):
    return vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = _face_corners(vertices, faces)
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def face_areas(mesh: TriMesh) -> np.ndarray:
    return _face_areas(mesh.vertices, mesh.faces)


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unit normals following the face winding (counterclockwise = outward)."""
    a, b, c = _face_corners(mesh.vertices, mesh.faces)
    n = np.cross(b - a, c - a)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def face_angles(mesh: TriMesh) -> np.ndarray:
    """Internal angles per face, shape (m, 3), degrees."""
    a, b, c = _face_corners(mesh.vertices, mesh.faces)
    out = np.empty((len(mesh.faces), 3))
    for i, (p, q, r) in enumerate(((a, b, c), (b, c, a), (c, a, b))):
        u, w = q - p, r - p
        cosang = np.einsum("ij,ij->i", u, w) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1)
        )
        out[:, i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def signed_volume(mesh: TriMesh) -> float:
    """Signed enclosed volume (mm^3); positive for outward-wound closed meshes."""
    a, b, c = _face_corners(mesh.vertices, mesh.faces)
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def boundary_edges(mesh: TriMesh) -> np.ndarray:
    """Undirected edges incident to exactly one face, shape (k, 2)."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    und = np.sort(edges, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    return uniq[counts == 1]


def mesh_quality_report(
    mesh: TriMesh, sliver_threshold_deg: float = 10.0, face_subset=None
) -> MeshQualityReport:
    """Angle statistics over `face_subset` (default all faces).

    boundary_edge_count is always over the whole mesh.
    """
    angles = face_angles(mesh)
    if face_subset is not None:
        angles = angles[np.asarray(face_subset, dtype=int)]
    per_face_min = angles.min(axis=1)
    return MeshQualityReport(
        min_angle=float(per_face_min.min()),
        max_angle=float(angles.max()),
        sliver_count=int((per_face_min < sliver_threshold_deg).sum()),
        boundary_edge_count=len(boundary_edges(mesh)),
    )


# ---------------------------------------------------------------------------
# point / triangle distance


def closest_point_on_triangles(points, a, b, c):
    """Closest point on each triangle (a_i, b_i, c_i) to each point p_i.

    All inputs (k, 3), evaluated pairwise. Returns (distances (k,),
    barycentric weights (k, 3), closest points (k, 3)). Region
    classification after Eberly; triangles are assumed non-degenerate
    (area above DEGENERATE_AREA_MM2).
    """
    p = np.asarray(points, dtype=float)
    e0 = b - a
    e1 = c - a
    d = a - p
    aa = np.einsum("ij,ij->i", e0, e0)
    ab = np.einsum("ij,ij->i", e0, e1)
    bb = np.einsum("ij,ij->i", e1, e1)
    ad = np.einsum("ij,ij->i", e0, d)
    bd = np.einsum("ij,ij->i", e1, d)
    det = np.maximum(aa * bb - ab * ab, 1e-300)
    s = ab * bd - bb * ad
    t = ab * ad - aa * bd

    zero = np.zeros_like(s)
    one = np.ones_like(s)

    def clamp01(x):
        return np.clip(x, 0.0, 1.0)

    # interior
    s_in, t_in = s / det, t / det
    # edge e0 (t = 0): minimize along s
    s_e0 = clamp01(np.divide(-ad, aa, out=zero.copy(), where=aa > 0))
    # edge e1 (s = 0)
    t_e1 = clamp01(np.divide(-bd, bb, out=zero.copy(), where=bb > 0))
    # edge bc (s + t = 1): param u from b to c
    denom_bc = aa - 2.0 * ab + bb
    u_bc = clamp01(
        np.divide(aa + ad - ab - bd, denom_bc, out=zero.copy(), where=denom_bc > 0)
    )

    inside = (s >= 0) & (t >= 0) & (s + t <= det)
    s_out = np.where(inside, s_in, np.nan)
    t_out = np.where(inside, t_in, np.nan)

    # outside: evaluate the three clamped edge candidates and take the best
    cand_s = np.stack([s_e0, zero, 1.0 - u_bc])
    cand_t = np.stack([zero, t_e1, u_bc])
    q = a[None] + cand_s[..., None] * e0[None] + cand_t[..., None] * e1[None]
    d2 = np.einsum("kij,kij->ki", q - p[None], q - p[None])
    best = np.argmin(d2, axis=0)
    idx = np.arange(len(p))
    s_out = np.where(inside, s_out, cand_s[best, idx])
    t_out = np.where(inside, t_out, cand_t[best, idx])

    closest = a + s_out[:, None] * e0 + t_out[:, None] * e1
    dist = np.linalg.norm(p - closest, axis=1)
    bary = np.stack([1.0 - s_out - t_out, s_out, t_out], axis=1)
    return dist, bary, closest


def _points_to_mesh(points: np.ndarray, mesh: TriMesh):
    """Per-point (distance, face index, barycentric weights) to the nearest face."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    va, vb, vc = _face_corners(mesh.vertices, mesh.faces)
    m = len(mesh.faces)
    n = len(points)
    # keep the broadcast point x face workspace around ~2M pairs
    chunk = max(1, 2_000_000 // m)
    dist = np.empty(n)
    fidx = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        p = np.repeat(points[lo:hi], m, axis=0)
        d, w, _ = closest_point_on_triangles(
            p,
            np.tile(va, (hi - lo, 1)),
            np.tile(vb, (hi - lo, 1)),
            np.tile(vc, (hi - lo, 1)),
        )
        d = d.reshape(hi - lo, m)
        w = w.reshape(hi - lo, m, 3)
        k = np.argmin(d, axis=1)
        rows = np.arange(hi - lo)
        dist[lo:hi] = d[rows, k]
        fidx[lo:hi] = k
        bary[lo:hi] = w[rows, k]
    return dist, fidx, bary


def point_to_mesh_distance(point: np.ndarray, mesh: TriMesh) -> float:
    """Distance (mm) from a point to the closest triangular face of the mesh."""
    d, _, _ = _points_to_mesh(np.asarray(point, dtype=float)[None, :], mesh)
    return float(d[0])


def scan_to_mesh(scan: PointCloud, mesh: TriMesh) -> float:
    """Mean over scan points of the exact point-to-nearest-face distance (mm)."""
    d, _, _ = _points_to_mesh(scan.points, mesh)
    return float(d.mean())


# ---------------------------------------------------------------------------
# nearest neighbours


def knn(query: np.ndarray, points: np.ndarray, k: int):
    """Exact k nearest neighbours of `query`, ascending by distance.

    Ties are broken by the lower point index. Returns (indices (k,),
    distances (k,)).
    """
    points = np.asarray(points, dtype=float)
    if k > len(points):
        raise ValueError(f"k={k} exceeds point count {len(points)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = np.linalg.norm(points - np.asarray(query, dtype=float), axis=1)
    order = np.argsort(d, kind="stable")[:k]
    return order, d[order]


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance between two point sets of any dimension.

    Half the sum of the two directed mean nearest-neighbour distances.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_distance requires non-empty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# ---------------------------------------------------------------------------
# Laplacian smoothing


def vertex_adjacency(mesh: TriMesh):
    """1-ring neighbourhood in CSR layout: (offsets (n+1,), neighbours)."""
    f = mesh.faces
    pairs = np.concatenate(
        [f[:, [0, 1]], f[:, [1, 0]], f[:, [1, 2]], f[:, [2, 1]], f[:, [2, 0]], f[:, [0, 2]]]
    )
    pairs = np.unique(pairs, axis=0)
    counts = np.bincount(pairs[:, 0], minlength=mesh.n_vertices)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return offsets, pairs[:, 1]


def uniform_laplacian(mesh: TriMesh) -> np.ndarray:
    """Per-vertex vector from the vertex to the centroid of its 1-ring."""
    offsets, nbrs = vertex_adjacency(mesh)
    counts = np.diff(offsets)
    if (counts == 0).any():
        bad = int(np.flatnonzero(counts == 0)[0])
        raise MeshError(f"vertex {bad} is isolated (no face references it)")
    owner = np.repeat(np.arange(mesh.n_vertices), counts)
    sums = np.zeros((mesh.n_vertices, 3))
    np.add.at(sums, owner, mesh.vertices[nbrs])
    return sums / counts[:, None] - mesh.vertices


def smooth_loss(mesh: TriMesh) -> float:
    """Mean norm of the uniform Laplacian over all vertices."""
    return float(np.linalg.norm(uniform_laplacian(mesh), axis=1).mean())


def laplacian_smooth(
    mesh: TriMesh, iterations: int, step: float, vertex_mask: Optional[np.ndarray] = None
) -> TriMesh:
    """Move vertices by `step` times their uniform Laplacian, `iterations` times.

    Topology is unchanged. `vertex_mask` restricts movement to the flagged
    vertices (used for seam-local smoothing).
    """
    if not 0.0 < step <= 1.0:
        raise ValueError(f"step must be in (0, 1], got {step}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    current = mesh
    for _ in range(iterations):
        delta = uniform_laplacian(current)
        if vertex_mask is not None:
            delta = np.where(np.asarray(vertex_mask, bool)[:, None], delta, 0.0)
        current = current.with_vertices(current.vertices + step * delta)
    return current


# ---------------------------------------------------------------------------
# reflection, sampling


def reflect_sagittal(geometry):
    """Mirror through the sagittal plane x = 0.

    Mesh winding is reversed so outward normals stay outward; signed
    volume is preserved exactly.
    """
    if isinstance(geometry, TriMesh):
        v = geometry.vertices * np.array([-1.0, 1.0, 1.0])
        return TriMesh(v, geometry.faces[:, [0, 2, 1]], geometry.uv)
    if isinstance(geometry, PointCloud):
        return PointCloud(geometry.points * np.array([-1.0, 1.0, 1.0]), geometry.colors)
    raise TypeError(f"expected TriMesh or PointCloud, got {type(geometry)!r}")


def downsample_random(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform subsample without replacement; deterministic per seed."""
    if n > len(cloud):
        raise ValueError(f"cannot draw {n} points from a cloud of {len(cloud)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.random.default_rng(seed).choice(len(cloud), size=n, replace=False)
    colors = cloud.colors[idx] if cloud.colors is not None else None
    return PointCloud(cloud.points[idx], colors)


def sample_points_on_mesh(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform surface samples.

    Returns (points (n, 3), face indices (n,), barycentric weights (n, 3));
    the extra outputs let callers differentiate sample positions with
    respect to the vertices.
    """
    areas = face_areas(mesh)
    fidx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[fidx]]
    points = np.einsum("nk,nkd->nd", bary, tri)
    return points, fidx, bary
