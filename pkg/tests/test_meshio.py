import numpy as np
import pytest

from pinna.meshes import PointCloud, TriMesh
from pinna.meshio import (
    MeshParseError,
    load_mesh,
    load_pointcloud,
    save_mesh,
    save_pointcloud,
)
from pinna.primitives import make_icosphere


def test_obj_roundtrip_single_triangle(tmp_path):
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    path = tmp_path / "tri.obj"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_roundtrip_with_uv(tmp_path):
    mesh = TriMesh(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], uv=[[0, 0], [1, 0], [0, 1]]
    )
    path = tmp_path / "tri_uv.obj"
    save_mesh(mesh, path)
    back = load_mesh(path)
    assert back.uv is not None
    assert np.allclose(back.uv, mesh.uv, atol=1e-6)


def test_ply_roundtrip_binary_and_ascii(tmp_path):
    mesh = make_icosphere(13.7, 1)
    for binary in (True, False):
        path = tmp_path / f"sphere_{binary}.ply"
        save_mesh(mesh, path, binary=binary)
        back = load_mesh(path)
        assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
        assert np.array_equal(back.faces, mesh.faces)


def test_pointcloud_roundtrip_with_colors(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(100, 3)) * 40, colors=rng.random((100, 3)))
    for binary in (True, False):
        path = tmp_path / f"cloud_{binary}.ply"
        save_pointcloud(cloud, path, binary=binary)
        back = load_pointcloud(path)
        assert np.abs(back.points - cloud.points).max() < 1e-6
        assert np.abs(back.colors - cloud.colors).max() <= 0.5 / 255 + 1e-9


def test_obj_quad_fan_split(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = load_mesh(path, triangulate=True)
    assert mesh.n_faces == 2
    with pytest.raises(MeshParseError, match="non-triangular"):
        load_mesh(path, triangulate=False)


def test_obj_face_index_out_of_range(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(MeshParseError, match="out of range"):
        load_mesh(path)


def test_obj_malformed_line_reports_lineno(tmp_path):
    path = tmp_path / "bad2.obj"
    path.write_text("v 0 0 0\nv oops 0 0\n")
    with pytest.raises(MeshParseError, match="bad2.obj:2"):
        load_mesh(path)


def test_ply_truncated_binary(tmp_path):
    mesh = make_icosphere(1.0, 0)
    path = tmp_path / "trunc.ply"
    save_mesh(mesh, path, binary=True)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 20])
    with pytest.raises(MeshParseError, match="truncated"):
        load_mesh(path)


def test_unknown_extension(tmp_path):
    with pytest.raises(MeshParseError, match="extension"):
        load_mesh(tmp_path / "mesh.stl")


def test_negative_obj_indices(tmp_path):
    path = tmp_path / "neg.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    mesh = load_mesh(path)
    assert np.array_equal(mesh.faces, [[0, 1, 2]])
