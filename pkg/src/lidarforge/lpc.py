"""Bit-exact labeled point cloud serialization (.lpc) and colored PLY export.

The .lpc layout is little-endian and fixed-width so a write/read/write round
trip is byte-identical in any language:

    magic   "LPC1"                      4 bytes
    flags   u16   bit0: ring/column fields present per point
    classes u16   number of classes
    points  u64   number of points
    class-name table: per class, u16 byte length + UTF-8 name
    per point: x, y, z float32; label u16; [ring u16; column u16]

The reader validates every header invariant and reports the byte offset of
the first defect.  PLY export is ASCII x y z r g b for interop and figures,
never the canonical format.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, LpcFormatError
from .lidar import LabeledPointCloud

MAGIC = b"LPC1"
FLAG_RING_COLUMN = 0x0001

DEFAULT_CLASS_COLORS = {
    "other": (255, 0, 0),
    "tractor": (0, 255, 0),
    "combine": (0, 0, 255),
    "trailer": (255, 105, 180),
}


def _point_dtype(with_ring_column):
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "<u2")]
    if with_ring_column:
        fields += [("ring", "<u2"), ("column", "<u2")]
    return np.dtype(fields)


def write_lpc(cloud, path):
    """Serialize ``cloud`` to ``path``; the round trip is bitwise lossless."""
    path = Path(path)
    n = cloud.num_points
    with_rc = cloud.rings is not None
    header = bytearray()
    header += MAGIC
    header += struct.pack("<H", FLAG_RING_COLUMN if with_rc else 0)
    header += struct.pack("<H", len(cloud.class_names))
    header += struct.pack("<Q", n)
    for name in cloud.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigError(f"class name too long ({len(raw)} bytes)")
        header += struct.pack("<H", len(raw))
        header += raw

    records = np.empty(n, dtype=_point_dtype(with_rc))
    records["x"] = cloud.points[:, 0]
    records["y"] = cloud.points[:, 1]
    records["z"] = cloud.points[:, 2]
    records["label"] = cloud.labels
    if with_rc:
        records["ring"] = cloud.rings
        records["column"] = cloud.columns
    path.write_bytes(bytes(header) + records.tobytes())


def read_lpc(path) -> LabeledPointCloud:
    """Parse ``path``, validating every header invariant."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LpcFormatError(f"cannot read file: {exc}", path=path) from exc

    if len(data) < 16:
        raise LpcFormatError(f"file too small for a header ({len(data)} bytes)", path=path, offset=0)
    if data[:4] != MAGIC:
        raise LpcFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", path=path, offset=0)
    (flags,) = struct.unpack_from("<H", data, 4)
    if flags & ~FLAG_RING_COLUMN:
        raise LpcFormatError(f"unknown flag bits 0x{flags:04x}", path=path, offset=4)
    (n_classes,) = struct.unpack_from("<H", data, 6)
    (n_points,) = struct.unpack_from("<Q", data, 8)

    offset = 16
    names = []
    for i in range(n_classes):
        if offset + 2 > len(data):
            raise LpcFormatError(f"truncated class-name table (class {i})", path=path, offset=offset)
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + length > len(data):
            raise LpcFormatError(f"truncated class name {i}", path=path, offset=offset)
        try:
            names.append(data[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise LpcFormatError(f"class name {i} is not UTF-8: {exc}", path=path, offset=offset) from exc
        offset += length

    with_rc = bool(flags & FLAG_RING_COLUMN)
    dtype = _point_dtype(with_rc)
    expected = offset + dtype.itemsize * n_points
    if len(data) != expected:
        raise LpcFormatError(
            f"byte length {len(data)} does not match header arithmetic ({expected})",
            path=path, offset=min(len(data), expected),
        )
    records = np.frombuffer(data, dtype=dtype, count=n_points, offset=offset)
    labels = records["label"]
    if n_points and n_classes == 0:
        raise LpcFormatError("points present but class table is empty", path=path, offset=6)
    if n_points:
        worst = int(labels.max())
        if worst >= n_classes:
            bad = int(np.argmax(labels >= n_classes))
            raise LpcFormatError(
                f"label {worst} out of range for {n_classes} classes (first at point {bad})",
                path=path, offset=offset + bad * dtype.itemsize + 12,
            )
    points = np.column_stack([records["x"], records["y"], records["z"]])
    return LabeledPointCloud(
        points=points,
        labels=labels.copy(),
        class_names=names,
        rings=records["ring"].copy() if with_rc else None,
        columns=records["column"].copy() if with_rc else None,
    )


def export_ply(cloud, path, predictions=None, colormap=None):
    """Write an ASCII PLY with per-point colors.

    Colors follow ``predictions`` when given (same length as the cloud),
    otherwise the cloud's own labels.  The colormap maps class names to
    (r, g, b); classes without a color are an error.
    """
    path = Path(path)
    if predictions is not None:
        predictions = np.ascontiguousarray(predictions, dtype=np.uint16).reshape(-1)
        if len(predictions) != cloud.num_points:
            raise ConfigError(
                f"{len(predictions)} predictions for {cloud.num_points} points"
            )
        labels = predictions
    else:
        labels = cloud.labels
    colormap = DEFAULT_CLASS_COLORS if colormap is None else colormap

    colors = np.zeros((len(cloud.class_names), 3), dtype=np.int64)
    used = np.unique(labels) if len(labels) else []
    for cid in used:
        if cid >= len(cloud.class_names):
            raise ConfigError(f"label {cid} out of range for the class table")
        name = cloud.class_names[cid]
        if name not in colormap:
            raise ConfigError(f"no color for class {name!r} in the colormap")
        colors[cid] = colormap[name]

    with path.open("w", encoding="ascii") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write(f"element vertex {cloud.num_points}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        rgb = colors[labels] if cloud.num_points else np.empty((0, 3), dtype=np.int64)
        for p, c in zip(cloud.points, rgb):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
