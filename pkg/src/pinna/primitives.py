"""Parametric mesh builders used by tests, demos, and synthetic assets."""

from __future__ import annotations

import numpy as np

from .meshes import TriMesh


def make_uv_sphere(radius: float = 1.0, rings: int = 8, segments: int = 12) -> TriMesh:
    """Closed lat/long sphere with two pole vertices; outward winding.

    Vertex count = (rings - 1) * segments + 2 with `rings >= 2` latitude bands.
    """
    if rings < 2 or segments < 3:
        raise ValueError("need rings >= 2 and segments >= 3")
    verts = [[0.0, radius, 0.0]]
    for i in range(1, rings):
        phi = np.pi * i / rings  # polar angle from +y
        y = radius * np.cos(phi)
        r = radius * np.sin(phi)
        for j in range(segments):
            th = 2.0 * np.pi * j / segments
            verts.append([r * np.cos(th), y, r * np.sin(th)])
    verts.append([0.0, -radius, 0.0])
    top, bottom = 0, len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append([top, ring(1, j), ring(1, j + 1)])
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
    for j in range(segments):
        faces.append([bottom, ring(rings - 1, j + 1), ring(rings - 1, j)])
    mesh = TriMesh(np.asarray(verts), np.asarray(faces))
    return _oriented_outward(mesh)


def make_icosphere(radius: float = 1.0, subdivisions: int = 3) -> TriMesh:
    """Geodesic sphere from a subdivided icosahedron; near-uniform triangles."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        midpoint = {}
        new_faces = []
        verts_list = list(verts)

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = verts_list[i] + verts_list[j]
                verts_list.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces)
    return _oriented_outward(TriMesh(verts * radius, faces))


def _oriented_outward(mesh: TriMesh) -> TriMesh:
    from .meshes import signed_volume

    if signed_volume(mesh) < 0:
        return TriMesh(mesh.vertices, mesh.faces[:, [0, 2, 1]], mesh.uv)
    return mesh


def make_grid_patch(
    nx: int, ny: int, width: float = 1.0, height: float = 1.0, origin=(0.0, 0.0, 0.0)
) -> TriMesh:
    """Flat rectangular grid in the z = const plane, (nx+1)*(ny+1) vertices."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1) + np.asarray(
        origin, dtype=float
    )

    def vid(i, j):
        return i * (ny + 1) + j

    faces = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriMesh(verts, np.asarray(faces))


def make_capped_cylinder(
    radius: float = 1.0, length: float = 2.0, segments: int = 24, rings: int = 8
) -> TriMesh:
    """Closed cylinder along y with fan caps; outward winding."""
    verts = []
    ys = np.linspace(-length / 2.0, length / 2.0, rings + 1)
    for y in ys:
        for j in range(segments):
            th = 2.0 * np.pi * j / segments
            verts.append([radius * np.cos(th), y, radius * np.sin(th)])
    bottom_c = len(verts)
    verts.append([0.0, -length / 2.0, 0.0])
    top_c = len(verts)
    verts.append([0.0, length / 2.0, 0.0])

    def vid(i, j):
        return i * segments + (j % segments)

    faces = []
    for i in range(rings):
        for j in range(segments):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces.append([a, b, c])
            faces.append([b, d, c])
    for j in range(segments):
        faces.append([bottom_c, vid(0, j + 1), vid(0, j)])
        faces.append([top_c, vid(rings, j), vid(rings, j + 1)])
    return _oriented_outward(TriMesh(np.asarray(verts), np.asarray(faces)))


def remove_faces(mesh: TriMesh, face_indices, compact: bool = True) -> TriMesh:
    """Drop the given faces; `compact` also drops now-unreferenced vertices."""
    keep = np.ones(mesh.n_faces, dtype=bool)
    keep[np.asarray(face_indices, dtype=int)] = False
    faces = mesh.faces[keep]
    if not compact:
        return TriMesh(mesh.vertices, faces, mesh.uv)
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    uv = mesh.uv[used] if mesh.uv is not None else None
    return TriMesh(mesh.vertices[used], remap[faces], uv)


def extract_faces(mesh: TriMesh, face_indices) -> TriMesh:
    """Submesh of the given faces with vertices compacted."""
    faces = mesh.faces[np.asarray(face_indices, dtype=int)]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    uv = mesh.uv[used] if mesh.uv is not None else None
    return TriMesh(mesh.vertices[used], remap[faces], uv)
