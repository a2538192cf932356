"""Stitch an open ear mesh into a body mesh with a matching hole.

The seam is produced by projecting both boundary loops onto a shared
plane (averaged from the normals of the faces around the two loops),
running a constrained Delaunay triangulation of the annulus between them
on the existing vertices only, and lifting the triangles back to 3D. The
result is watertight across the seam; an optional Laplacian pass smooths
the vertices within a couple of rings of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .meshes import (
    MeshError,
    MeshQualityReport,
    TriMesh,
    boundary_edges,
    face_areas,
    face_normals,
    laplacian_smooth,
    mesh_quality_report,
    vertex_adjacency,
)
from .transforms import SimilarityTransform


@dataclass(frozen=True)
class BoundaryLoop:
    """Closed boundary edge loop, ordered along the boundary direction."""

    vertices: np.ndarray  # ordered vertex indices
    mesh: TriMesh

    def positions(self) -> np.ndarray:
        return self.mesh.vertices[self.vertices]

    def perimeter(self) -> float:
        p = self.positions()
        return float(np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1).sum())

    def __len__(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class ProjectionPlane:
    origin: np.ndarray
    normal: np.ndarray
    basis: np.ndarray  # (2, 3) orthonormal, orthogonal to normal

    def project(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.origin) @ self.basis.T


def extract_boundary_loops(mesh: TriMesh) -> list[BoundaryLoop]:
    """All maximal boundary loops, longest perimeter first.

    A boundary edge is one with a single incident face; the loop follows
    the direction those faces wind it, so the surface stays on a
    consistent side. Raises on non-manifold edges.
    """
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    over = uniq[counts > 2]
    if len(over):
        a, b = over[0]
        raise MeshError(f"non-manifold edge ({a}, {b}) with {counts.max()} incident faces")
    edge_set = {(int(a), int(b)) for a, b in directed}
    nxt = {}
    for a, b in directed:
        a, b = int(a), int(b)
        if (b, a) not in edge_set:  # no twin: boundary edge
            if a in nxt:
                raise MeshError(f"non-manifold boundary vertex {a}")
            nxt[a] = b
    loops = []
    remaining = dict(nxt)
    while remaining:
        start, cursor = next(iter(remaining.items()))
        loop = [start]
        while True:
            nxt_v = remaining.pop(loop[-1], None)
            if nxt_v is None:
                raise MeshError(f"boundary chain broke at vertex {loop[-1]}")
            if nxt_v == start:
                break
            loop.append(nxt_v)
        loops.append(BoundaryLoop(np.asarray(loop, dtype=np.int64), mesh))
    loops.sort(key=lambda lp: -lp.perimeter())
    return loops


def _loop_incident_face_normals(loop: BoundaryLoop):
    members = np.isin(loop.mesh.faces, loop.vertices).any(axis=1)
    normals = face_normals(loop.mesh)[members]
    areas = face_areas(loop.mesh)[members]
    return normals, areas


def fit_projection_plane(*loops: BoundaryLoop) -> ProjectionPlane:
    """Plane from the area-weighted mean normal of faces around the loops.

    Accepts one loop or several (the stitch uses a single shared plane for
    both). Raises when the normals cancel.
    """
    if not loops:
        raise ValueError("need at least one loop")
    sums = np.zeros(3)
    for loop in loops:
        normals, areas = _loop_incident_face_normals(loop)
        sums += (normals * areas[:, None]).sum(axis=0)
    norm = np.linalg.norm(sums)
    if norm < 1e-9:
        raise MeshError("loop face normals cancel; no stable projection plane")
    normal = sums / norm
    pts = np.concatenate([loop.positions() for loop in loops])
    seed = np.array([1.0, 0.0, 0.0])
    if abs(normal @ seed) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    u = seed - (seed @ normal) * normal
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return ProjectionPlane(origin=pts.mean(axis=0), normal=normal, basis=np.stack([u, v]))


# ---------------------------------------------------------------------------
# 2D predicates


def polygon_area(points: np.ndarray) -> float:
    """Signed shoelace area; positive for counterclockwise."""
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def point_in_polygon(point, polygon) -> bool:
    x, y = point
    inside = False
    p = np.asarray(polygon, dtype=float)
    n = len(p)
    for i in range(n):
        x0, y0 = p[i]
        x1, y1 = p[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xi:
                inside = not inside
    return inside


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def segments_properly_intersect(p1, p2, q1, q2, eps=1e-12) -> bool:
    """True when the open segments cross (shared endpoints do not count)."""
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps)) and (
        (d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps)
    ):
        return True
    return False


def _in_circumcircle(a, b, c, d, eps=1e-12) -> bool:
    """d strictly inside the circumcircle of CCW triangle (a, b, c)."""
    m = np.array(
        [
            [a[0] - d[0], a[1] - d[1], (a[0] - d[0]) ** 2 + (a[1] - d[1]) ** 2],
            [b[0] - d[0], b[1] - d[1], (b[0] - d[0]) ** 2 + (b[1] - d[1]) ** 2],
            [c[0] - d[0], c[1] - d[1], (c[0] - d[0]) ** 2 + (c[1] - d[1]) ** 2],
        ]
    )
    scale = max(abs(m[:, :2]).max(), 1.0)
    return np.linalg.det(m) > eps * scale**4


# ---------------------------------------------------------------------------
# constrained Delaunay triangulation of a polygon / annulus


def _ear_clip(points: np.ndarray, sequence: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate a simple CCW polygon given as a sequence of point ids."""
    seq = list(sequence)
    triangles = []
    guard = 0
    eps = 1e-12 * max(np.ptp(points[:, 0]), np.ptp(points[:, 1])) ** 2
    while len(seq) > 3:
        guard += 1
        if guard > 4 * len(sequence) ** 2:
            raise MeshError("ear clipping failed to converge (degenerate polygon?)")
        n = len(seq)
        clipped = False
        # prefer the ear with the best minimal angle for numeric robustness
        best = None
        for k in range(n):
            ia, ib, ic = seq[(k - 1) % n], seq[k], seq[(k + 1) % n]
            a, b, c = points[ia], points[ib], points[ic]
            cross = _orient(a, b, c)
            if cross <= eps:
                continue
            blocked = False
            for other in seq:
                if other in (ia, ib, ic):
                    continue
                p = points[other]
                if (
                    _orient(a, b, p) >= -eps
                    and _orient(b, c, p) >= -eps
                    and _orient(c, a, p) >= -eps
                ):
                    blocked = True
                    break
            if blocked:
                continue
            quality = _min_angle_2d(a, b, c)
            if best is None or quality > best[0]:
                best = (quality, k, (ia, ib, ic))
        if best is None:
            raise MeshError("no valid ear found; polygon is not simple")
        _, k, tri = best
        triangles.append(tri)
        del seq[k]
        clipped = True
        if not clipped:  # pragma: no cover
            break
    triangles.append((seq[0], seq[1], seq[2]))
    return triangles


def _min_angle_2d(a, b, c) -> float:
    la, lb, lc = (
        np.linalg.norm(c - b),
        np.linalg.norm(a - c),
        np.linalg.norm(b - a),
    )
    angles = []
    for opp, x, y in ((la, lb, lc), (lb, lc, la), (lc, la, lb)):
        cosv = np.clip((x * x + y * y - opp * opp) / (2 * x * y), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(cosv)))
    return min(angles)


def _lawson_flip(points, triangles, constrained: set) -> list[tuple[int, int, int]]:
    """Flip interior non-constrained edges until locally Delaunay."""
    tris = [tuple(t) for t in triangles]
    max_rounds = 20 * max(len(tris), 1)
    for _ in range(max_rounds):
        edge_map = {}
        for ti, (a, b, c) in enumerate(tris):
            for e in ((a, b), (b, c), (c, a)):
                edge_map.setdefault((min(e), max(e)), []).append(ti)
        flipped = False
        for edge, owners in edge_map.items():
            if len(owners) != 2 or edge in constrained:
                continue
            t1, t2 = owners
            a, b = edge
            c = next(v for v in tris[t1] if v not in edge)
            d = next(v for v in tris[t2] if v not in edge)
            if c == d:
                continue
            # flip only strictly convex quads where the incircle test fails
            pa, pb, pc, pd = points[a], points[b], points[c], points[d]
            tri1 = _ccw(points, (a, b, c))
            if not _in_circumcircle(points[tri1[0]], points[tri1[1]], points[tri1[2]], pd):
                continue
            if not (
                segments_properly_intersect(pc, pd, pa, pb)
            ):
                continue
            tris[t1] = _ccw(points, (c, d, a))
            tris[t2] = _ccw(points, (d, c, b))
            flipped = True
            break
        if not flipped:
            return tris
    raise MeshError("Delaunay edge flipping did not converge")


def _ccw(points, tri):
    a, b, c = tri
    if _orient(points[a], points[b], points[c]) < 0:
        return (a, c, b)
    return tri


def _validate_loops(outer: np.ndarray, inner: Optional[np.ndarray]):
    loops = [("outer", outer)] + ([("inner", inner)] if inner is not None else [])
    for name, loop in loops:
        n = len(loop)
        if n < 3:
            raise MeshError(f"{name} loop needs at least 3 vertices")
        for i in range(n):
            for j in range(i + 1, n):
                if segments_properly_intersect(
                    loop[i], loop[(i + 1) % n], loop[j], loop[(j + 1) % n]
                ):
                    raise MeshError(
                        f"{name} loop self-intersects between segments {i} and {j}"
                    )
    if inner is not None:
        for k, p in enumerate(inner):
            if not point_in_polygon(p, outer):
                raise MeshError(f"inner loop vertex {k} lies outside the outer loop")
        n, m = len(outer), len(inner)
        for i in range(n):
            for j in range(m):
                if segments_properly_intersect(
                    outer[i], outer[(i + 1) % n], inner[j], inner[(j + 1) % m]
                ):
                    raise MeshError(
                        f"outer segment {i} crosses inner segment {j}"
                    )


def triangulate_annulus(
    outer: np.ndarray, inner: Optional[np.ndarray] = None
) -> np.ndarray:
    """Constrained Delaunay triangulation of the region between two loops.

    `outer` and `inner` are (n, 2) / (m, 2) loop coordinates; the output
    triangles index the concatenated vertex list (outer first). No new
    vertices are created; both loops become constraint edges. With no
    inner loop the plain polygon is triangulated.
    """
    outer = np.asarray(outer, dtype=float)
    if polygon_area(outer) < 0:
        raise MeshError("outer loop must be counterclockwise")
    inner_arr = None
    if inner is not None:
        inner_arr = np.asarray(inner, dtype=float)
        if polygon_area(inner_arr) > 0:
            raise MeshError("inner loop must be clockwise")
    _validate_loops(outer, inner_arr)

    n = len(outer)
    if inner_arr is None:
        points = outer
        sequence = list(range(n))
        constrained = {(min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)}
    else:
        m = len(inner_arr)
        points = np.concatenate([outer, inner_arr])
        bridge = _find_bridge(outer, inner_arr)
        if bridge is None:
            raise MeshError("no mutually visible bridge between the loops")
        bi, bj = bridge
        # walk the whole hole (clockwise order keeps the merged polygon simple CCW)
        hole = [n + (bj + k) % m for k in range(m)] + [n + bj]
        sequence = list(range(bi + 1)) + hole + list(range(bi, n))
        constrained = {(min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)}
        constrained |= {
            (min(n + j, n + (j + 1) % m), max(n + j, n + (j + 1) % m)) for j in range(m)
        }

    triangles = _ear_clip(points, sequence)
    triangles = _lawson_flip(points, triangles, constrained)
    return np.asarray([_ccw(points, t) for t in triangles], dtype=np.int64)


def _find_bridge(outer: np.ndarray, inner: np.ndarray):
    """Mutually visible (outer index, inner index) pair, nearest first."""
    n, m = len(outer), len(inner)
    d2 = ((outer[:, None, :] - inner[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=None, kind="stable")
    for flat in order:
        i, j = int(flat // m), int(flat % m)
        a, b = outer[i], inner[j]
        ok = True
        for k in range(n):
            if k == i or (k + 1) % n == i:
                continue
            if segments_properly_intersect(a, b, outer[k], outer[(k + 1) % n]):
                ok = False
                break
        if ok:
            for k in range(m):
                if k == j or (k + 1) % m == j:
                    continue
                if segments_properly_intersect(a, b, inner[k], inner[(k + 1) % m]):
                    ok = False
                    break
        if ok:
            mid = 0.5 * (a + b)
            if point_in_polygon(mid, outer) and not point_in_polygon(mid, inner):
                return i, j
    return None


def constrained_delaunay_violations(
    points: np.ndarray, triangles: np.ndarray, constrained: set, eps: float = 1e-9
) -> list:
    """Brute-force audit of the constrained empty-circumcircle property.

    A triangle is flagged when some vertex lies strictly inside its
    circumcircle and the segment from the triangle centroid to that vertex
    is not blocked by a constraint edge.
    """
    points = np.asarray(points, dtype=float)
    out = []
    for t in triangles:
        tri = _ccw(points, tuple(int(v) for v in t))
        a, b, c = (points[v] for v in tri)
        centroid = (a + b + c) / 3.0
        for v in range(len(points)):
            if v in tri:
                continue
            p = points[v]
            m = np.array(
                [
                    [a[0] - p[0], a[1] - p[1], (a[0] - p[0]) ** 2 + (a[1] - p[1]) ** 2],
                    [b[0] - p[0], b[1] - p[1], (b[0] - p[0]) ** 2 + (b[1] - p[1]) ** 2],
                    [c[0] - p[0], c[1] - p[1], (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2],
                ]
            )
            scale = max(1.0, abs(m[:, :2]).max())
            if np.linalg.det(m) <= eps * scale**4:
                continue
            blocked = False
            for (e0, e1) in constrained:
                if v in (e0, e1):
                    continue
                if segments_properly_intersect(centroid, p, points[e0], points[e1]):
                    blocked = True
                    break
            if not blocked:
                out.append((tuple(tri), v))
    return out


# ---------------------------------------------------------------------------
# stitching


@dataclass(frozen=True)
class StitchConfig:
    transform: SimilarityTransform = field(default_factory=SimilarityTransform)
    body_hole: object = "longest"  # or an index into the body's loop list
    smoothing_iterations: int = 3
    smoothing_step: float = 0.5
    smoothing_rings: int = 2
    sliver_threshold_deg: float = 10.0


def suggest_ear_transform(ear: TriMesh, body: TriMesh, body_hole="longest") -> SimilarityTransform:
    """Initial placement guess: align the ear loop centroid and plane
    normal with the body hole's."""
    ear_loop = _single_loop(ear)
    hole = _pick_hole(body, body_hole)
    p_ear = fit_projection_plane(ear_loop)
    p_hole = fit_projection_plane(hole)
    # rotate ear plane normal onto the hole normal (the hole faces outward
    # where the ear's rim faces outward too)
    axis = np.cross(p_ear.normal, p_hole.normal)
    s = np.linalg.norm(axis)
    c = float(p_ear.normal @ p_hole.normal)
    if s < 1e-12:
        r = np.eye(3) if c > 0 else -np.eye(3) + 2 * np.outer(p_ear.normal, p_ear.normal)
    else:
        k = axis / s
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r = np.eye(3) + s * kx + (1 - c) * kx @ kx
    from .transforms import euler_from_matrix

    angles = euler_from_matrix(r)
    ear_centroid = ear_loop.positions().mean(axis=0)
    hole_centroid = hole.positions().mean(axis=0)
    rotated = r @ ear_centroid
    return SimilarityTransform(1.0, angles, hole_centroid - rotated)


def _single_loop(mesh: TriMesh) -> BoundaryLoop:
    loops = extract_boundary_loops(mesh)
    if len(loops) != 1:
        raise MeshError(f"expected exactly one boundary loop, found {len(loops)}")
    return loops[0]


def _pick_hole(body: TriMesh, selector) -> BoundaryLoop:
    loops = extract_boundary_loops(body)
    if not loops:
        raise MeshError("body mesh has no boundary loops (no hole to stitch into)")
    if selector == "longest":
        return loops[0]
    idx = int(selector)
    if not 0 <= idx < len(loops):
        raise MeshError(f"body hole index {idx} out of range (found {len(loops)} loops)")
    return loops[idx]


def stitch(ear: TriMesh, body: TriMesh, config: StitchConfig):
    """Weld the transformed ear into the body hole.

    Returns (merged mesh, quality report over the seam triangles). The
    merged surface has no boundary edges along the seam; pre-existing
    boundary loops elsewhere on the body are untouched.
    """
    ear_t = TriMesh(config.transform.apply(ear.vertices), ear.faces, ear.uv)
    ear_loop = _single_loop(ear_t)
    hole = _pick_hole(body, config.body_hole)

    plane = fit_projection_plane(hole, ear_loop)
    outer2d = plane.project(hole.positions())
    inner2d = plane.project(ear_loop.positions())

    outer_ids = hole.vertices
    inner_ids = ear_loop.vertices
    if polygon_area(outer2d) < 0:
        outer2d = outer2d[::-1]
        outer_ids = outer_ids[::-1]
    if polygon_area(inner2d) > 0:
        inner2d = inner2d[::-1]
        inner_ids = inner_ids[::-1]

    seam_local = triangulate_annulus(outer2d, inner2d)
    n_outer = len(outer_ids)
    local_to_global = np.concatenate([outer_ids, inner_ids + body.n_vertices])
    seam_faces = local_to_global[seam_local]

    vertices = np.concatenate([body.vertices, ear_t.vertices])
    faces = np.concatenate([body.faces, ear_t.faces + body.n_vertices])

    seam_faces = _orient_seam(seam_faces, faces)
    all_faces = np.concatenate([faces, seam_faces])
    merged = TriMesh(vertices, all_faces, None)

    seam_vertex_ids = set(local_to_global.tolist())
    leftover = [
        (a, b)
        for a, b in boundary_edges(merged)
        if int(a) in seam_vertex_ids and int(b) in seam_vertex_ids
    ]
    if leftover:
        raise MeshError(f"seam is not watertight; {len(leftover)} boundary edges remain")

    if config.smoothing_iterations > 0:
        mask = _ring_mask(merged, local_to_global, config.smoothing_rings)
        merged = laplacian_smooth(
            merged, config.smoothing_iterations, config.smoothing_step, vertex_mask=mask
        )

    seam_idx = np.arange(len(faces), len(all_faces))
    report = mesh_quality_report(
        merged, sliver_threshold_deg=config.sliver_threshold_deg, face_subset=seam_idx
    )
    return merged, report


def _orient_seam(seam_faces: np.ndarray, host_faces: np.ndarray) -> np.ndarray:
    """Flip the seam patch if it traverses a shared edge the same way the
    host does (consistent orientation needs opposite directions)."""
    host_directed = {
        (int(a), int(b))
        for f in host_faces
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))
    }
    for f in seam_faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            ab = (int(a), int(b))
            if ab in host_directed:
                return seam_faces[:, [0, 2, 1]]
            if (ab[1], ab[0]) in host_directed:
                return seam_faces
    return seam_faces


def _ring_mask(mesh: TriMesh, seed_vertices, rings: int) -> np.ndarray:
    offsets, nbrs = vertex_adjacency(mesh)
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    frontier = np.unique(np.asarray(seed_vertices, dtype=int))
    mask[frontier] = True
    for _ in range(rings):
        nxt = []
        for v in frontier:
            nxt.append(nbrs[offsets[v] : offsets[v + 1]])
        frontier = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, dtype=int)
        frontier = frontier[~mask[frontier]]
        mask[frontier] = True
    return mask
