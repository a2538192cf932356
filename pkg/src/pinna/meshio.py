"""OBJ and PLY readers/writers.

OBJ carries positions (and optional per-vertex uv written 1:1 with
vertices); normals are never stored, callers recompute them. PLY supports
ascii and binary_little_endian, reading float or double properties and
writing double so that save->load round-trips preserve positions well
below 1e-6 mm.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .meshes import MeshError, PointCloud, TriMesh


class MeshParseError(MeshError):
    """Malformed mesh file; message carries the file and line/offset."""


def _fan_triangulate(indices, triangulate, path, lineno):
    if len(indices) < 3:
        raise MeshParseError(f"{path}:{lineno}: face with {len(indices)} vertices")
    if len(indices) == 3:
        return [indices]
    if not triangulate:
        raise MeshParseError(
            f"{path}:{lineno}: non-triangular face ({len(indices)} vertices) "
            "and triangulation disabled"
        )
    return [[indices[0], indices[i], indices[i + 1]] for i in range(1, len(indices) - 1)]


# ---------------------------------------------------------------------------
# OBJ


def _load_obj(path: Path, triangulate: bool) -> TriMesh:
    positions, uvs, faces = [], [], []
    uv_index_mismatch = False
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    corner_v = []
                    for chunk in parts[1:]:
                        fields = chunk.split("/")
                        vi = int(fields[0])
                        vi = vi - 1 if vi > 0 else len(positions) + vi
                        if len(fields) > 1 and fields[1]:
                            ti = int(fields[1])
                            ti = ti - 1 if ti > 0 else len(uvs) + ti
                            if ti != vi:
                                uv_index_mismatch = True
                        corner_v.append(vi)
                    faces.extend(_fan_triangulate(corner_v, triangulate, path, lineno))
            except (ValueError, IndexError) as exc:
                raise MeshParseError(f"{path}:{lineno}: {exc}") from exc
    if not positions:
        raise MeshParseError(f"{path}: no vertices found")
    uv = None
    if uvs and not uv_index_mismatch and len(uvs) == len(positions):
        uv = np.asarray(uvs)
    try:
        return TriMesh(np.asarray(positions), np.asarray(faces), uv)
    except MeshError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def _save_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.8f} {y:.8f} {z:.8f}\n")
        if mesh.uv is not None:
            for u, v in mesh.uv:
                fh.write(f"vt {u:.8f} {v:.8f}\n")
            for a, b, c in mesh.faces + 1:
                fh.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
        else:
            for a, b, c in mesh.faces + 1:
                fh.write(f"f {a} {b} {c}\n")


# ---------------------------------------------------------------------------
# PLY

_PLY_SCALARS = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise MeshParseError(f"{path}:1: not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, list_count_dtype|None)])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise MeshParseError(f"{path}:{lineno}: unexpected EOF in header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise MeshParseError(f"{path}:{lineno}: unsupported format {parts[1]}")
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], _PLY_SCALARS[parts[3]], _PLY_SCALARS[parts[2]]))
            else:
                elements[-1][2].append((parts[2], _PLY_SCALARS[parts[1]], None))
        elif parts[0] == "end_header":
            break
        else:
            raise MeshParseError(f"{path}:{lineno}: unknown header line {parts[0]!r}")
    if fmt is None:
        raise MeshParseError(f"{path}: header missing format line")
    return fmt, elements, lineno


def _read_ply(path: Path):
    """Returns (vertex record array or dict of columns, faces list or None)."""
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_ply_header(fh, path)
        data = {}
        if fmt == "ascii":
            text = fh.read().decode("ascii", errors="replace").splitlines()
            cursor = 0
            for name, count, props in elements:
                rows = []
                for i in range(count):
                    if cursor >= len(text):
                        raise MeshParseError(
                            f"{path}:{header_lines + cursor + 1}: expected "
                            f"{count} '{name}' rows, file ended after {i}"
                        )
                    fields = text[cursor].split()
                    cursor += 1
                    try:
                        row = {}
                        k = 0
                        for pname, dtype, list_dtype in props:
                            if list_dtype is None:
                                row[pname] = float(fields[k])
                                k += 1
                            else:
                                n = int(fields[k])
                                row[pname] = [float(x) for x in fields[k + 1 : k + 1 + n]]
                                k += 1 + n
                        rows.append(row)
                    except (ValueError, IndexError) as exc:
                        raise MeshParseError(
                            f"{path}:{header_lines + cursor}: {exc}"
                        ) from exc
                data[name] = rows
        else:
            for name, count, props in elements:
                fixed = all(ld is None for _, _, ld in props)
                if fixed:
                    dtype = np.dtype([(p, "<" + d) for p, d, _ in props])
                    buf = fh.read(dtype.itemsize * count)
                    if len(buf) != dtype.itemsize * count:
                        raise MeshParseError(
                            f"{path}: truncated binary data in element '{name}'"
                        )
                    data[name] = np.frombuffer(buf, dtype=dtype)
                else:
                    rows = []
                    for _ in range(count):
                        row = {}
                        for pname, dtype, list_dtype in props:
                            try:
                                if list_dtype is None:
                                    size = np.dtype(dtype).itemsize
                                    (val,) = struct.unpack(
                                        "<" + {"f4": "f", "f8": "d", "i4": "i", "u4": "I"}[dtype],
                                        fh.read(size),
                                    )
                                    row[pname] = float(val)
                                else:
                                    n = int(
                                        np.frombuffer(
                                            fh.read(np.dtype(list_dtype).itemsize),
                                            dtype="<" + list_dtype,
                                        )[0]
                                    )
                                    vals = np.frombuffer(
                                        fh.read(np.dtype(dtype).itemsize * n), dtype="<" + dtype
                                    )
                                    if len(vals) != n:
                                        raise MeshParseError(
                                            f"{path}: truncated list property in '{name}'"
                                        )
                                    row[pname] = vals.tolist()
                            except (ValueError, IndexError, struct.error) as exc:
                                raise MeshParseError(
                                    f"{path}: truncated binary data in element '{name}'"
                                ) from exc
                        rows.append(row)
                    data[name] = rows
    return data


def _ply_vertices(data, path):
    if "vertex" not in data:
        raise MeshParseError(f"{path}: PLY file has no vertex element")
    rows = data["vertex"]
    if isinstance(rows, np.ndarray):
        names = rows.dtype.names
        if not all(ax in names for ax in "xyz"):
            raise MeshParseError(f"{path}: vertex element missing x/y/z")
        pts = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(float)
        colors = None
        if all(ch in names for ch in ("red", "green", "blue")):
            colors = (
                np.stack([rows["red"], rows["green"], rows["blue"]], axis=1).astype(float)
                / 255.0
            )
        return pts, colors
    try:
        pts = np.array([[r["x"], r["y"], r["z"]] for r in rows])
    except KeyError as exc:
        raise MeshParseError(f"{path}: vertex element missing {exc}") from exc
    colors = None
    if rows and all(k in rows[0] for k in ("red", "green", "blue")):
        colors = np.array([[r["red"], r["green"], r["blue"]] for r in rows]) / 255.0
    return pts, colors


def _load_ply_mesh(path: Path, triangulate: bool) -> TriMesh:
    data = _read_ply(path)
    pts, _ = _ply_vertices(data, path)
    faces = []
    for i, row in enumerate(data.get("face", [])):
        key = "vertex_indices" if "vertex_indices" in row else "vertex_index"
        if key not in row:
            raise MeshParseError(f"{path}: face {i} has no vertex index list")
        faces.extend(
            _fan_triangulate([int(v) for v in row[key]], triangulate, path, f"face {i}")
        )
    if not faces:
        raise MeshParseError(f"{path}: PLY file has no faces (load it as a point cloud)")
    try:
        return TriMesh(pts, np.asarray(faces))
    except MeshError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def _save_ply_mesh(mesh: TriMesh, path: Path, binary: bool) -> None:
    _write_ply(path, mesh.vertices, None, mesh.faces, binary)


def _write_ply(path, points, colors, faces, binary):
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(points)}"]
    header += [f"property double {ax}" for ax in "xyz"]
    if colors is not None:
        header += [f"property uchar {ch}" for ch in ("red", "green", "blue")]
    if faces is not None:
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")
    rgb = None
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if rgb is not None:
                vtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            varr = np.empty(len(points), dtype=np.dtype(vtype))
            varr["x"], varr["y"], varr["z"] = points[:, 0], points[:, 1], points[:, 2]
            if rgb is not None:
                varr["red"], varr["green"], varr["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            fh.write(varr.tobytes())
            if faces is not None:
                farr = np.empty(len(faces), dtype=np.dtype([("n", "u1"), ("idx", "<i4", 3)]))
                farr["n"] = 3
                farr["idx"] = faces
                fh.write(farr.tobytes())
        else:
            for i, p in enumerate(points):
                line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
                if rgb is not None:
                    line += " {} {} {}".format(*rgb[i])
                fh.write((line + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# public entry points


def load_mesh(path, triangulate: bool = True) -> TriMesh:
    """Load an OBJ or PLY mesh; format inferred from the extension.

    Non-triangular faces are fan-split when `triangulate` is true, else
    raise MeshParseError.
    """
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        return _load_obj(path, triangulate)
    if ext == ".ply":
        return _load_ply_mesh(path, triangulate)
    raise MeshParseError(f"{path}: unsupported mesh extension {ext!r}")


def save_mesh(mesh: TriMesh, path, binary: bool = True) -> None:
    """Save to OBJ (text) or PLY (binary by default); inferred from extension."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".obj":
        _save_obj(mesh, path)
    elif ext == ".ply":
        _save_ply_mesh(mesh, path, binary)
    else:
        raise MeshParseError(f"{path}: unsupported mesh extension {ext!r}")


def load_pointcloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() != ".ply":
        raise MeshParseError(f"{path}: point clouds use PLY, got {path.suffix!r}")
    data = _read_ply(path)
    pts, colors = _ply_vertices(data, path)
    try:
        return PointCloud(pts, colors)
    except MeshError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc


def save_pointcloud(cloud: PointCloud, path, binary: bool = True) -> None:
    path = Path(path)
    if path.suffix.lower() != ".ply":
        raise MeshParseError(f"{path}: point clouds use PLY, got {path.suffix!r}")
    _write_ply(path, cloud.points, cloud.colors, None, binary)
