import numpy as np
import pytest

from pinna.meshes import (
    MeshError,
    PointCloud,
    TriMesh,
    boundary_edges,
    point_to_mesh_distance,
    sample_points_on_mesh,
    signed_volume,
)
from pinna.primitives import (
    extract_faces,
    make_capped_cylinder,
    make_grid_patch,
    make_icosphere,
    make_uv_sphere,
    remove_faces,
)
from pinna.stitching import (
    StitchConfig,
    constrained_delaunay_violations,
    extract_boundary_loops,
    fit_projection_plane,
    polygon_area,
    stitch,
    suggest_ear_transform,
    triangulate_annulus,
)
from pinna.transforms import SimilarityTransform


def faces_where(mesh, pred):
    ok = pred(mesh.vertices)
    return np.where(ok[mesh.faces].all(axis=1))[0]


def tri_min_angle(pts, tris):
    worst = 180.0
    for t in tris:
        a, b, c = pts[t[0]], pts[t[1]], pts[t[2]]
        for p, q, r in ((a, b, c), (b, c, a), (c, a, b)):
            v1, v2 = q - p, r - p
            cosv = np.dot(v1, v2) / (np.linalg.norm(v1) * np.linalg.norm(v2))
            worst = min(worst, np.degrees(np.arccos(np.clip(cosv, -1, 1))))
    return worst


def triangulation_area(pts, tris):
    total = 0.0
    for t in tris:
        a, b, c = pts[t[0]], pts[t[1]], pts[t[2]]
        total += 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    return total


# ---------------------------------------------------------------------------
# boundary loops


def test_closed_sphere_has_no_loops():
    assert extract_boundary_loops(make_icosphere(1.0, 1)) == []


def test_single_triangle_loop():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    loops = extract_boundary_loops(mesh)
    assert len(loops) == 1 and len(loops[0]) == 3


def test_plane_with_two_holes():
    grid = make_grid_patch(8, 8, 8.0, 8.0)
    hole1 = faces_where(grid, lambda v: (v[:, 0] >= 0.9) & (v[:, 0] <= 3.1) & (v[:, 1] >= 0.9) & (v[:, 1] <= 3.1))
    hole2 = faces_where(grid, lambda v: (v[:, 0] >= 4.9) & (v[:, 0] <= 7.1) & (v[:, 1] >= 4.9) & (v[:, 1] <= 7.1))
    carved = remove_faces(grid, np.concatenate([hole1, hole2]))
    loops = extract_boundary_loops(carved)
    assert len(loops) == 3
    # brute-force count of boundary edges must equal the loop lengths
    assert sum(len(lp) for lp in loops) == len(boundary_edges(carved))
    # ordering: outer boundary first (longest perimeter)
    assert loops[0].perimeter() > loops[1].perimeter()


def test_nonmanifold_edge_detected():
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0.5]]
    faces = [[0, 1, 2], [0, 1, 3], [0, 1, 4]]
    with pytest.raises(MeshError, match="non-manifold"):
        extract_boundary_loops(TriMesh(verts, faces))


# ---------------------------------------------------------------------------
# projection plane


def test_plane_of_flat_loop():
    grid = make_grid_patch(4, 4, 4.0, 4.0)
    hole = faces_where(grid, lambda v: (v[:, 0] >= 0.9) & (v[:, 0] <= 3.1) & (v[:, 1] >= 0.9) & (v[:, 1] <= 3.1))
    carved = remove_faces(grid, hole)
    loop = extract_boundary_loops(carved)[-1]
    plane = fit_projection_plane(loop)
    assert abs(abs(plane.normal[2]) - 1.0) < 1e-12
    proj = plane.project(loop.positions())
    assert proj.shape == (len(loop), 2)


def test_plane_on_gently_curved_patch():
    sphere = make_uv_sphere(10.0, 16, 24)
    cap = faces_where(sphere, lambda v: v[:, 1] > 8.5)
    patch = extract_faces(sphere, cap)
    loop = extract_boundary_loops(patch)[0]
    plane = fit_projection_plane(loop)
    from pinna.meshes import face_normals

    normals = face_normals(patch)
    angles = np.degrees(np.arccos(np.clip(normals @ plane.normal, -1, 1)))
    assert angles.max() < 30.0  # all incident normals near the average


def test_cancelling_normals_error():
    # two opposing flat patches sharing a boundary-ish configuration
    top = make_grid_patch(2, 2, 2.0, 2.0)
    flipped = TriMesh(top.vertices, top.faces[:, [0, 2, 1]])
    loop_top = extract_boundary_loops(top)[0]
    loop_bot = extract_boundary_loops(flipped)[0]
    with pytest.raises(MeshError, match="cancel"):
        fit_projection_plane(loop_top, loop_bot)


# ---------------------------------------------------------------------------
# annulus triangulation


def test_square_two_triangles():
    tris = triangulate_annulus(np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]]))
    assert len(tris) == 2
    pts = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    assert tri_min_angle(pts, tris) == pytest.approx(45.0, abs=1e-9)


def staggered_16gons():
    th = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    outer = np.stack([2 * np.cos(th), 2 * np.sin(th)], axis=1)
    inner_ccw = np.stack([np.cos(th + np.pi / 16), np.sin(th + np.pi / 16)], axis=1)
    return outer, inner_ccw[::-1]  # inner clockwise


def test_concentric_16gons_audit_and_angles():
    outer, inner = staggered_16gons()
    tris = triangulate_annulus(outer, inner)
    assert len(tris) == 32
    pts = np.concatenate([outer, inner])
    n = 16
    constrained = {(min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)}
    constrained |= {(min(n + j, n + (j + 1) % n), max(n + j, n + (j + 1) % n)) for j in range(n)}
    assert constrained_delaunay_violations(pts, tris, constrained) == []
    assert tri_min_angle(pts, tris) >= 20.0
    # no triangle inside the hole, none outside the outer loop
    area = triangulation_area(pts, tris)
    expected = polygon_area(outer) + polygon_area(inner)  # inner is CW (negative)
    assert area == pytest.approx(expected, rel=1e-9)


def test_rotated_annulus_exact_area():
    th = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    outer = np.stack([2 * np.cos(th), 2 * np.sin(th)], axis=1)
    inner = np.stack([np.cos(th), np.sin(th)], axis=1)[::-1]
    tris = triangulate_annulus(outer, inner)
    pts = np.concatenate([outer, inner])
    assert triangulation_area(pts, tris) == pytest.approx(
        polygon_area(outer) + polygon_area(inner), rel=1e-9
    )


def test_triangulation_start_vertex_invariance():
    outer, inner = staggered_16gons()
    tris_a = triangulate_annulus(outer, inner)
    roll = 5
    outer_b = np.roll(outer, roll, axis=0)
    inner_b = np.roll(inner, 3, axis=0)
    tris_b = triangulate_annulus(outer_b, inner_b)

    def canonical(tris, outer_map, inner_map):
        out = set()
        for t in tris:
            mapped = tuple(sorted(outer_map[v] if v < 16 else 16 + inner_map[v - 16] for v in t))
            out.add(mapped)
        return out

    ident = np.arange(16)
    set_a = canonical(tris_a, ident, ident)
    set_b = canonical(tris_b, np.roll(ident, roll), np.roll(ident, 3))
    assert set_a == set_b


def test_loop_validation_errors():
    square = np.array([[0.0, 0], [4, 0], [4, 4], [0, 4]])
    bowtie = np.array([[1.0, 1], [3, 3], [3, 1], [1, 3]])[::-1]
    with pytest.raises(MeshError, match="self-intersects"):
        triangulate_annulus(square, bowtie)
    outside = np.array([[5.0, 5], [6, 5], [6, 6], [5, 6]])[::-1]
    with pytest.raises(MeshError, match="outside"):
        triangulate_annulus(square, outside)
    with pytest.raises(MeshError, match="counterclockwise"):
        triangulate_annulus(square[::-1])


# ---------------------------------------------------------------------------
# stitch


def cylinder_fixture():
    cyl = make_capped_cylinder(radius=10, length=30, segments=24, rings=10)
    sel = faces_where(cyl, lambda v: (v[:, 0] > 8.6) & (np.abs(v[:, 1]) < 6.1))
    body = remove_faces(cyl, sel)
    patch = extract_faces(cyl, sel)
    pc = patch.vertices.mean(axis=0)
    ear = TriMesh(pc + 0.72 * (patch.vertices - pc), patch.faces)
    return ear, body


def test_cylinder_stitch_watertight():
    ear, body = cylinder_fixture()
    merged, report = stitch(ear, body, StitchConfig())
    assert len(boundary_edges(merged)) == 0
    # every edge shared by exactly two faces
    edges = np.sort(
        np.concatenate([merged.faces[:, [0, 1]], merged.faces[:, [1, 2]], merged.faces[:, [2, 0]]]),
        axis=1,
    )
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert (counts == 2).all()
    assert report.min_angle >= 10.0
    assert signed_volume(merged) > 0


def test_sphere_disk_euler_characteristic():
    sph = make_uv_sphere(20.0, 12, 16)
    sel = faces_where(sph, lambda v: v[:, 1] > 13.0)
    body = remove_faces(sph, sel)
    patch = extract_faces(sph, sel)
    pc = patch.vertices.mean(axis=0)
    ear = TriMesh(pc + 0.7 * (patch.vertices - pc), patch.faces)
    merged, _ = stitch(ear, body, StitchConfig())
    V, F = merged.n_vertices, merged.n_faces
    E = len(
        np.unique(
            np.sort(
                np.concatenate(
                    [merged.faces[:, [0, 1]], merged.faces[:, [1, 2]], merged.faces[:, [2, 0]]]
                ),
                axis=1,
            ),
            axis=0,
        )
    )
    assert V - E + F == 2
    assert len(boundary_edges(merged)) == 0


def cut_and_restitch_fixture():
    top = make_grid_patch(8, 8, 40.0, 40.0)
    hole = faces_where(
        top,
        lambda v: (v[:, 0] >= 9.9) & (v[:, 0] <= 30.1) & (v[:, 1] >= 9.9) & (v[:, 1] <= 30.1),
    )
    inner = faces_where(
        top,
        lambda v: (v[:, 0] >= 14.9) & (v[:, 0] <= 25.1) & (v[:, 1] >= 14.9) & (v[:, 1] <= 25.1),
    )
    body = remove_faces(top, hole)
    ear = extract_faces(top, inner)
    return top, ear, body


def test_cut_and_restitch_recovers_surface(rng):
    original, ear, body = cut_and_restitch_fixture()
    merged, _ = stitch(ear, body, StitchConfig(body_hole=1, smoothing_iterations=0))
    pts_m, _, _ = sample_points_on_mesh(merged, 2000, rng)
    pts_o, _, _ = sample_points_on_mesh(original, 2000, rng)
    d1 = max(point_to_mesh_distance(p, original) for p in pts_m[::20])
    d2 = max(point_to_mesh_distance(p, merged) for p in pts_o[::20])
    d3 = max(point_to_mesh_distance(p, original) for p in merged.vertices)
    assert max(d1, d2, d3) < 1e-6


def test_seam_area_close_to_planar_annulus():
    ear, body = cylinder_fixture()
    cfg = StitchConfig(smoothing_iterations=0)
    merged, _ = stitch(ear, body, cfg)
    n_before = body.n_faces + ear.n_faces
    seam = merged.faces[n_before:]
    from pinna.meshes import _face_areas

    lifted = _face_areas(merged.vertices, seam).sum()
    # planar annulus area from the projected loops
    from pinna.stitching import _pick_hole, _single_loop, fit_projection_plane

    ear_t = TriMesh(cfg.transform.apply(ear.vertices), ear.faces)
    hole = _pick_hole(body, "longest")
    ear_loop = _single_loop(ear_t)
    plane = fit_projection_plane(hole, ear_loop)
    o2 = plane.project(hole.positions())
    i2 = plane.project(ear_loop.positions())
    planar = abs(polygon_area(o2)) - abs(polygon_area(i2))
    assert lifted == pytest.approx(planar, rel=0.10)


def test_stitch_error_on_multi_loop_ear():
    ear, body = cylinder_fixture()
    # punch an extra hole strictly inside the ear so it gains a second loop
    rim = set(extract_boundary_loops(ear)[0].vertices.tolist())
    interior = [
        fi for fi, f in enumerate(ear.faces) if not any(int(v) in rim for v in f)
    ]
    broken = remove_faces(ear, interior[:1], compact=False)
    with pytest.raises(MeshError, match="exactly one"):
        stitch(broken, body, StitchConfig())


def test_suggest_transform_aligns_centroids():
    ear, body = cylinder_fixture()
    moved = TriMesh(ear.vertices + np.array([40.0, -25.0, 12.0]), ear.faces)
    t = suggest_ear_transform(moved, body)
    merged, report = stitch(moved, body, StitchConfig(transform=t))
    assert len(boundary_edges(merged)) == 0


def test_smoothing_is_seam_local():
    ear, body = cylinder_fixture()
    merged_s, _ = stitch(ear, body, StitchConfig(smoothing_iterations=3))
    merged_n, _ = stitch(ear, body, StitchConfig(smoothing_iterations=0))
    moved = np.linalg.norm(merged_s.vertices - merged_n.vertices, axis=1)
    # the cylinder caps are far from the seam and must not move
    far = np.abs(merged_n.vertices[:, 1]) > 14.9
    assert moved[far].max() == 0.0
    assert moved.max() > 0.0
