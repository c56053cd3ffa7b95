"""Mesh file readers (PLY, OBJ, binary STL) and a small PLY writer.

The readers pull out positions and triangle indices only; normals, colors,
and materials are skipped.  Faces with more than three vertices are fan
triangulated.  Parse failures raise :class:`MeshFormatError` with the
offending line (text formats) or byte offset (binary formats).
"""

import struct
from pathlib import Path

import numpy as np

from .errors import MeshFormatError
from .geometry import TriangleMesh, weld_vertices

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

STL_HEADER_BYTES = 80
STL_RECORD_BYTES = 50


def load_mesh(path, format=None, weld=False, weld_tolerance=1e-6):
    """Load a triangle mesh from ``path``.

    ``format`` is one of ``"ply"``, ``"obj"``, ``"stl"``; when omitted it is
    inferred from the file extension.  Vertex order is preserved as stored in
    the file.  Vertex welding is off by default; with ``weld=True`` vertices
    within ``weld_tolerance`` meters are merged after loading.
    """
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower()
    if format not in ("ply", "obj", "stl"):
        raise MeshFormatError(f"unsupported mesh format {format!r}", path=path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise MeshFormatError(f"cannot read file: {exc}", path=path) from exc

    if format == "ply":
        mesh = _parse_ply(data, path)
    elif format == "obj":
        mesh = _parse_obj(data, path)
    else:
        mesh = _parse_stl(data, path)

    if mesh.num_triangles == 0:
        raise MeshFormatError("mesh contains zero triangles", path=path)
    if weld:
        mesh = weld_vertices(mesh, weld_tolerance)
    return mesh


def save_mesh_ply(mesh, path):
    """Write a mesh as ASCII PLY (positions and triangle faces only)."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.num_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.num_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _parse_ply(data, path):
    # --- header ---
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("not a PLY file (missing 'ply'/'end_header')", path=path)
    body_start = data.find(b"\n", end)
    if body_start < 0:
        raise MeshFormatError("truncated header", path=path, offset=end)
    body_start += 1

    header = data[:body_start].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(kind, dtype_or_pair, prop_name), ...])
    for lineno, raw in enumerate(header, start=1):
        tokens = raw.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise MeshFormatError(f"unsupported format line {raw!r}", path=path, line=lineno)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise MeshFormatError(f"malformed element line {raw!r}", path=path, line=lineno)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshFormatError("property before any element", path=path, line=lineno)
            props = elements[-1][2]
            if tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise MeshFormatError(f"malformed list property {raw!r}", path=path, line=lineno)
                props.append(("list", (_PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]), tokens[4]))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise MeshFormatError(f"malformed property {raw!r}", path=path, line=lineno)
                props.append(("scalar", _PLY_TYPES[tokens[1]], tokens[2]))
        else:
            raise MeshFormatError(f"unrecognized header line {raw!r}", path=path, line=lineno)
    if fmt is None:
        raise MeshFormatError("missing format line", path=path)

    if fmt == "ascii":
        return _parse_ply_ascii(data, body_start, elements, path, header_lines=len(header))
    endian = "<" if fmt == "binary_little_endian" else ">"
    return _parse_ply_binary(data, body_start, elements, endian, path)


def _ply_extract_vertices(columns, names, path):
    try:
        ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    except ValueError:
        raise MeshFormatError("vertex element lacks x/y/z properties", path=path) from None
    return np.column_stack([columns[ix], columns[iy], columns[iz]]).astype(np.float64)


def _parse_ply_ascii(data, body_start, elements, path, header_lines):
    text = data[body_start:].decode("ascii", errors="replace").splitlines()
    cursor = 0
    vertices = None
    triangles = []
    for name, count, props in elements:
        if cursor + count > len(text):
            raise MeshFormatError(
                f"element {name!r} declares {count} rows but file has {len(text) - cursor}",
                path=path, line=header_lines + cursor + 1,
            )
        rows = text[cursor:cursor + count]
        base_line = header_lines + cursor + 1
        cursor += count
        if name == "vertex":
            if any(kind == "list" for kind, _, _ in props):
                raise MeshFormatError("list property on vertex element is unsupported", path=path)
            parsed = np.empty((count, len(props)))
            for i, row in enumerate(rows):
                tokens = row.split()
                if len(tokens) < len(props):
                    raise MeshFormatError(f"vertex row has {len(tokens)} fields, expected {len(props)}",
                                          path=path, line=base_line + i)
                try:
                    parsed[i] = [float(t) for t in tokens[:len(props)]]
                except ValueError as exc:
                    raise MeshFormatError(f"bad vertex value: {exc}", path=path, line=base_line + i) from exc
            vertices = _ply_extract_vertices(parsed.T, [p[2] for p in props], path)
        elif name == "face":
            list_pos = next((i for i, (kind, _, _) in enumerate(props) if kind == "list"), None)
            if list_pos is None:
                raise MeshFormatError("face element lacks a list property", path=path)
            for i, row in enumerate(rows):
                tokens = row.split()
                if list_pos >= len(tokens):
                    raise MeshFormatError("face row too short", path=path, line=base_line + i)
                try:
                    n = int(tokens[list_pos])
                    idx = [int(t) for t in tokens[list_pos + 1:list_pos + 1 + n]]
                except ValueError as exc:
                    raise MeshFormatError(f"bad face value: {exc}", path=path, line=base_line + i) from exc
                if len(idx) != n or n < 3:
                    raise MeshFormatError(f"face lists {n} indices, found {len(idx)}",
                                          path=path, line=base_line + i)
                for k in range(1, n - 1):
                    triangles.append((idx[0], idx[k], idx[k + 1]))
        # other elements: rows already skipped
    if vertices is None:
        raise MeshFormatError("no vertex element", path=path)
    return _finish_mesh(vertices, triangles, path)


def _parse_ply_binary(data, offset, elements, endian, path):
    vertices = None
    triangles = []
    for name, count, props in elements:
        has_list = any(kind == "list" for kind, _, _ in props)
        if not has_list:
            dtype = np.dtype([(f"f{i}", endian + t) for i, (_, t, _) in enumerate(props)])
            nbytes = dtype.itemsize * count
            if offset + nbytes > len(data):
                raise MeshFormatError(
                    f"element {name!r} needs {nbytes} bytes, {len(data) - offset} remain",
                    path=path, offset=offset,
                )
            if name == "vertex":
                rows = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
                cols = [rows[f"f{i}"] for i in range(len(props))]
                vertices = _ply_extract_vertices(cols, [p[2] for p in props], path)
            offset += nbytes
        else:
            if name != "face" or len(props) != 1:
                # Mixed scalar+list elements are rare; parse record by record.
                offset = _skip_ply_mixed(data, offset, count, props, endian, path,
                                         triangles if name == "face" else None)
                continue
            _, (ctype, itype), _ = props[0]
            csize = np.dtype(ctype).itemsize
            isize = np.dtype(itype).itemsize
            offset = _parse_ply_faces(data, offset, count, endian, ctype, itype,
                                      csize, isize, triangles, path)
    if vertices is None:
        raise MeshFormatError("no vertex element", path=path)
    return _finish_mesh(vertices, triangles, path)


def _parse_ply_faces(data, offset, count, endian, ctype, itype, csize, isize, triangles, path):
    if count == 0:
        return offset
    first_n = int(np.frombuffer(data, dtype=endian + ctype, count=1, offset=offset)[0])
    stride = csize + first_n * isize
    uniform = offset + stride * count <= len(data)
    if uniform:
        block = np.frombuffer(data, dtype=np.uint8, count=stride * count, offset=offset)
        counts = block.reshape(count, stride)[:, :csize].copy().view(endian + ctype).ravel()
        uniform = bool((counts == first_n).all())
    if uniform and first_n >= 3:
        idx = (
            block.reshape(count, stride)[:, csize:].copy()
            .view(endian + itype).reshape(count, first_n).astype(np.int64)
        )
        for k in range(1, first_n - 1):
            triangles.extend(np.column_stack([idx[:, 0], idx[:, k], idx[:, k + 1]]))
        return offset + stride * count
    # Non-uniform face sizes: walk record by record.
    for _ in range(count):
        if offset + csize > len(data):
            raise MeshFormatError("truncated face record", path=path, offset=offset)
        n = int(np.frombuffer(data, dtype=endian + ctype, count=1, offset=offset)[0])
        offset += csize
        if n < 3:
            raise MeshFormatError(f"face with {n} vertices", path=path, offset=offset - csize)
        if offset + n * isize > len(data):
            raise MeshFormatError("truncated face indices", path=path, offset=offset)
        idx = np.frombuffer(data, dtype=endian + itype, count=n, offset=offset).astype(np.int64)
        offset += n * isize
        for k in range(1, n - 1):
            triangles.append((idx[0], idx[k], idx[k + 1]))
    return offset


def _skip_ply_mixed(data, offset, count, props, endian, path, triangles):
    for _ in range(count):
        face = None
        for kind, spec, pname in props:
            if kind == "scalar":
                offset += np.dtype(spec).itemsize
            else:
                ctype, itype = spec
                csize, isize = np.dtype(ctype).itemsize, np.dtype(itype).itemsize
                if offset + csize > len(data):
                    raise MeshFormatError("truncated list record", path=path, offset=offset)
                n = int(np.frombuffer(data, dtype=endian + ctype, count=1, offset=offset)[0])
                offset += csize
                if offset + n * isize > len(data):
                    raise MeshFormatError("truncated list data", path=path, offset=offset)
                if triangles is not None and pname in ("vertex_indices", "vertex_index") and n >= 3:
                    face = np.frombuffer(data, dtype=endian + itype, count=n, offset=offset).astype(np.int64)
                offset += n * isize
        if face is not None:
            for k in range(1, len(face) - 1):
                triangles.append((face[0], face[k], face[k + 1]))
    return offset


def _parse_obj(data, path):
    vertices = []
    triangles = []
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise MeshFormatError(f"vertex needs 3 coordinates: {raw!r}", path=path, line=lineno)
            try:
                vertices.append((float(tokens[1]), float(tokens[2]), float(tokens[3])))
            except ValueError as exc:
                raise MeshFormatError(f"bad vertex value: {exc}", path=path, line=lineno) from exc
        elif tokens[0] == "f":
            idx = []
            for tok in tokens[1:]:
                head = tok.split("/")[0]
                try:
                    k = int(head)
                except ValueError as exc:
                    raise MeshFormatError(f"bad face index {tok!r}", path=path, line=lineno) from exc
                if k == 0:
                    raise MeshFormatError("OBJ indices are 1-based; 0 is invalid", path=path, line=lineno)
                k = k - 1 if k > 0 else len(vertices) + k
                if not 0 <= k < len(vertices):
                    raise MeshFormatError(f"face index {tok} out of range ({len(vertices)} vertices so far)",
                                          path=path, line=lineno)
                idx.append(k)
            if len(idx) < 3:
                raise MeshFormatError(f"face with {len(idx)} vertices", path=path, line=lineno)
            for k in range(1, len(idx) - 1):
                triangles.append((idx[0], idx[k], idx[k + 1]))
        # vn/vt/usemtl/o/g/s/mtllib: ignored
    if not vertices:
        raise MeshFormatError("no vertices", path=path)
    return _finish_mesh(np.asarray(vertices, dtype=np.float64), triangles, path)


def _parse_stl(data, path):
    """Binary STL: 80-byte header, u32-LE facet count, 50-byte facet records."""
    if len(data) < STL_HEADER_BYTES + 4:
        raise MeshFormatError(f"file too small for binary STL ({len(data)} bytes)", path=path, offset=0)
    (count,) = struct.unpack_from("<I", data, STL_HEADER_BYTES)
    expected = STL_HEADER_BYTES + 4 + STL_RECORD_BYTES * count
    if len(data) != expected:
        if data[:5] == b"solid" and b"facet" in data[:512]:
            raise MeshFormatError("looks like ASCII STL; only binary STL is supported", path=path, offset=0)
        raise MeshFormatError(
            f"size mismatch: header declares {count} facets ({expected} bytes), file has {len(data)}",
            path=path, offset=STL_HEADER_BYTES,
        )
    record = np.dtype([("normal", "<f4", 3), ("corners", "<f4", (3, 3)), ("attr", "<u2")])
    facets = np.frombuffer(data, dtype=record, count=count, offset=STL_HEADER_BYTES + 4)
    vertices = facets["corners"].reshape(-1, 3).astype(np.float64)
    triangles = np.arange(3 * count, dtype=np.int32).reshape(-1, 3)
    return TriangleMesh(vertices, triangles)


def _finish_mesh(vertices, triangles, path):
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= len(vertices)):
        raise MeshFormatError(
            f"face index out of range: [{tris.min()}, {tris.max()}] vs {len(vertices)} vertices",
            path=path,
        )
    return TriangleMesh(vertices, tris.astype(np.int32))
