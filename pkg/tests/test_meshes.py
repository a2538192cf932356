import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinna.meshes import (
    MeshError,
    PointCloud,
    TriMesh,
    chamfer_distance,
    closest_point_on_triangles,
    downsample_random,
    knn,
    laplacian_smooth,
    mesh_quality_report,
    point_to_mesh_distance,
    reflect_sagittal,
    sample_points_on_mesh,
    scan_to_mesh,
    signed_volume,
    smooth_loss,
    uniform_laplacian,
)
from pinna.primitives import make_icosphere, make_uv_sphere
from pinna.transforms import SimilarityTransform


def single_triangle():
    return TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


# ---------------------------------------------------------------------------
# construction invariants


def test_face_index_out_of_range_rejected():
    with pytest.raises(MeshError, match="out of range"):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_degenerate_face_rejected():
    with pytest.raises(MeshError, match="degenerate"):
        TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_uv_must_match_vertex_count():
    with pytest.raises(MeshError, match="uv"):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], uv=[[0, 0]])


def test_empty_cloud_rejected():
    with pytest.raises(MeshError):
        PointCloud(np.empty((0, 3)))


# ---------------------------------------------------------------------------
# point-to-mesh distance


def test_point_on_face_has_zero_distance():
    assert point_to_mesh_distance([0.25, 0.25, 0.0], single_triangle()) == pytest.approx(0.0, abs=1e-12)


def test_point_above_centroid_distance_is_height():
    h = 0.37
    d = point_to_mesh_distance([1 / 3, 1 / 3, h], single_triangle())
    assert d == pytest.approx(h, rel=1e-12)


def brute_force_point_mesh(point, mesh, samples=400):
    """Dense barycentric surface sampling per face."""
    best = np.inf
    u = np.linspace(0, 1, int(np.sqrt(samples)))
    for tri in mesh.faces:
        a, b, c = mesh.vertices[tri]
        for s in u:
            for t in u:
                if s + t > 1:
                    continue
                q = a + s * (b - a) + t * (c - a)
                best = min(best, np.linalg.norm(point - q))
    return best


def test_point_outside_projections_matches_brute_force(rng):
    mesh = make_icosphere(1.0, 1)
    for _ in range(5):
        p = rng.normal(size=3) * 3.0
        exact = point_to_mesh_distance(p, mesh)
        brute = brute_force_point_mesh(p, mesh, samples=2500)
        assert exact <= brute + 1e-9
        assert exact == pytest.approx(brute, abs=0.02)  # sampling resolution


def test_distance_bounded_by_vertex_distance(rng):
    mesh = make_icosphere(1.0, 1)
    for _ in range(20):
        p = rng.normal(size=3) * 2.0
        d = point_to_mesh_distance(p, mesh)
        assert d <= np.linalg.norm(mesh.vertices - p, axis=1).min() + 1e-12


def test_closest_point_barycentric_consistency(rng):
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(50, 3))
    c = rng.normal(size=(50, 3))
    p = rng.normal(size=(50, 3)) * 2
    d, bary, q = closest_point_on_triangles(p, a, b, c)
    q2 = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    assert np.allclose(q, q2, atol=1e-9)
    assert np.allclose(np.linalg.norm(p - q, axis=1), d)
    assert (bary > -1e-9).all() and (bary.sum(axis=1) == pytest.approx(1.0, abs=1e-9))


# ---------------------------------------------------------------------------
# scan-to-mesh


def test_scan_on_surface_is_zero(shape_model, rng):
    from pinna.morphable import decode_shape

    mesh = decode_shape(shape_model, np.zeros(shape_model.n_components))
    pts, _, _ = sample_points_on_mesh(mesh, 500, rng)
    assert scan_to_mesh(PointCloud(pts), mesh) < 1e-9


def test_scan_uniform_offset_above_plane():
    plane = TriMesh(
        [[0, 0, 0], [10, 0, 0], [10, 10, 0], [0, 10, 0]], [[0, 1, 2], [0, 2, 3]]
    )
    d = 2.5
    scan = PointCloud(plane.vertices + [0, 0, d])
    assert scan_to_mesh(scan, plane) == pytest.approx(d, rel=1e-12)


def test_scan_to_mesh_matches_per_point_minimum(rng):
    mesh = make_icosphere(1.0, 1)
    pts = rng.normal(size=(20, 3)) * 1.5
    expected = np.mean([brute_force_point_mesh(p, mesh, 900) for p in pts])
    got = scan_to_mesh(PointCloud(pts), mesh)
    assert got <= expected + 1e-9
    assert got == pytest.approx(expected, abs=0.02)


def test_scan_permutation_invariance(rng):
    mesh = make_icosphere(1.0, 1)
    pts = rng.normal(size=(30, 3)) * 2
    perm = rng.permutation(30)
    assert scan_to_mesh(PointCloud(pts), mesh) == pytest.approx(
        scan_to_mesh(PointCloud(pts[perm]), mesh), rel=1e-12
    )


# ---------------------------------------------------------------------------
# chamfer / knn


def quadratic_chamfer(a, b):
    d_ab = np.linalg.norm(a[:, None] - b[None], axis=2)
    return 0.5 * (d_ab.min(axis=1).mean() + d_ab.min(axis=0).mean())


def test_chamfer_identical_sets_zero(rng):
    a = rng.normal(size=(15, 3))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_single_pair_2d():
    assert chamfer_distance([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)


def test_chamfer_matches_quadratic_oracle(rng):
    a = rng.normal(size=(20, 3))
    b = rng.normal(size=(20, 3)) + 0.5
    assert chamfer_distance(a, b) == pytest.approx(quadratic_chamfer(a, b), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_chamfer_symmetry(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(r.integers(1, 12), 2))
    b = r.normal(size=(r.integers(1, 12), 2))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)


def test_knn_full_sort(rng):
    pts = rng.normal(size=(10, 3))
    q = rng.normal(size=3)
    idx, dist = knn(q, pts, 10)
    expected = np.argsort(np.linalg.norm(pts - q, axis=1), kind="stable")
    assert np.array_equal(idx, expected)
    assert (np.diff(dist) >= 0).all()


def test_knn_coincident_point_first(rng):
    pts = rng.normal(size=(8, 3))
    idx, dist = knn(pts[3], pts, 2)
    assert idx[0] == 3 and dist[0] == 0.0


def test_knn_matches_sort_oracle(rng):
    pts = rng.normal(size=(40, 3))
    q = rng.normal(size=3)
    idx, dist = knn(q, pts, 3)
    d = np.linalg.norm(pts - q, axis=1)
    oracle = np.argsort(d, kind="stable")[:3]
    assert np.array_equal(idx, oracle)


def test_knn_tie_break_by_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    idx, _ = knn([0.0, 0.0, 0.0], pts, 3)
    assert idx.tolist() == [0, 1, 2]


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn([0, 0, 0], np.zeros((3, 3)), 4)


# ---------------------------------------------------------------------------
# Laplacian


def hexagon_with_apex(apex):
    angles = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles), np.zeros(6)], axis=1)
    verts = np.vstack([apex, ring])
    faces = [[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)]
    return TriMesh(verts, faces)


def test_laplacian_zero_at_ring_centroid():
    mesh = hexagon_with_apex([0.0, 0.0, 0.0])
    lap = uniform_laplacian(mesh)
    assert np.linalg.norm(lap[0]) == pytest.approx(0.0, abs=1e-12)


def test_laplacian_norm_equals_displacement():
    delta = np.array([0.1, -0.2, 0.3])
    mesh = hexagon_with_apex(delta)
    lap = uniform_laplacian(mesh)
    assert np.linalg.norm(lap[0]) == pytest.approx(np.linalg.norm(delta), rel=1e-12)


def test_isolated_vertex_raises():
    mesh = TriMesh(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]
    )
    # appending an unused vertex triggers the isolated check in the laplacian
    bad = TriMesh(np.vstack([mesh.vertices, [5, 5, 5]]), mesh.faces)
    with pytest.raises(MeshError, match="vertex 3"):
        uniform_laplacian(bad)


def test_smooth_zero_iterations_is_identity():
    mesh = make_uv_sphere(1.0, 6, 8)
    assert np.allclose(laplacian_smooth(mesh, 0, 0.5).vertices, mesh.vertices)


def test_smooth_loss_strictly_decreases_on_noisy_sphere(rng):
    sphere = make_uv_sphere(1.0, 10, 14)
    noisy = sphere.with_vertices(sphere.vertices + rng.normal(size=sphere.vertices.shape) * 0.05)
    values = [smooth_loss(noisy)]
    current = noisy
    for _ in range(10):
        current = laplacian_smooth(current, 1, 0.5)
        values.append(smooth_loss(current))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_smooth_step_validation():
    mesh = make_uv_sphere(1.0, 4, 6)
    with pytest.raises(ValueError):
        laplacian_smooth(mesh, 1, 0.0)
    with pytest.raises(ValueError):
        laplacian_smooth(mesh, 1, 1.5)


def test_smooth_commutes_with_rigid_motion(rng):
    mesh = make_uv_sphere(1.0, 6, 9)
    noisy = mesh.with_vertices(mesh.vertices + rng.normal(size=mesh.vertices.shape) * 0.03)
    t = SimilarityTransform(1.0, np.array([0.3, -0.6, 0.9]), np.array([2.0, -1.0, 4.0]))
    a = laplacian_smooth(noisy.with_vertices(t.apply(noisy.vertices)), 3, 0.5)
    b = laplacian_smooth(noisy, 3, 0.5)
    assert np.allclose(a.vertices, t.apply(b.vertices), atol=1e-9)


# ---------------------------------------------------------------------------
# reflection / downsampling


def test_reflect_point():
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    assert np.allclose(reflect_sagittal(cloud).points, [[-1.0, 2.0, 3.0]])


def test_reflect_involution(rng):
    mesh = make_icosphere(1.0, 1)
    twice = reflect_sagittal(reflect_sagittal(mesh))
    assert np.array_equal(twice.vertices, mesh.vertices)
    assert np.array_equal(twice.faces, mesh.faces)


def test_reflect_preserves_signed_volume():
    mesh = make_icosphere(1.0, 2)
    assert signed_volume(reflect_sagittal(mesh)) == pytest.approx(signed_volume(mesh), rel=1e-12)


def test_reflect_preserves_pairwise_distances(rng):
    pts = rng.normal(size=(12, 3))
    ref = reflect_sagittal(PointCloud(pts)).points
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(ref[:, None] - ref[None], axis=2)
    assert np.allclose(d0, d1)


def test_downsample_full_is_permutation(rng):
    pts = rng.normal(size=(25, 3))
    out = downsample_random(PointCloud(pts), 25, seed=3)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_downsample_deterministic(rng):
    cloud = PointCloud(rng.normal(size=(500, 3)))
    a = downsample_random(cloud, 50, seed=7)
    b = downsample_random(cloud, 50, seed=7)
    assert np.array_equal(a.points, b.points)


def test_downsample_membership(rng):
    cloud = PointCloud(rng.normal(size=(5000, 3)))
    out = downsample_random(cloud, 1000, seed=1)
    pool = set(map(tuple, cloud.points))
    assert all(tuple(p) in pool for p in out.points)


def test_downsample_too_many():
    with pytest.raises(ValueError):
        downsample_random(PointCloud(np.zeros((3, 3))), 4, seed=0)


def test_quality_report_bounds():
    report = mesh_quality_report(make_icosphere(1.0, 1))
    assert 0 <= report.min_angle <= 60
    assert report.sliver_count == 0
    assert report.boundary_edge_count == 0
