"""File formats: PLY point clouds, DMAP depth maps and JSON helpers."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_OPTIONAL = ("nx", "ny", "nz", "curvature")


def write_ply(path, points, normals=None, curvatures=None, binary=True):
    """Write vertices with optional ``nx ny nz`` and ``curvature`` properties (float64)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    names = ["x", "y", "z"]
    cols = [points]
    if normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(np.asarray(normals, dtype=float).reshape(n, 3))
    if curvatures is not None:
        names.append("curvature")
        cols.append(np.asarray(curvatures, dtype=float).reshape(n, 1))
    data = np.hstack(cols) if cols else np.zeros((0, 3))
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_ply(path):
    """Read a PLY vertex element. Returns ``(points, normals or None, curvatures or None)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            if tok[1] == "list":
                # only the leading vertex element is read, later list elements are skipped
                if len(elements) == 1:
                    raise FormatError(f"{path}: list properties in the vertex element are not supported")
                continue
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type {tok[1]}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt}")
    if not elements or elements[0][0] != "vertex":
        raise FormatError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    for required in ("x", "y", "z"):
        if required not in names:
            raise FormatError(f"{path}: missing property {required}")
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii").split("\n")
        rows = [r.split() for r in text if r.strip()][:count]
        if len(rows) < count:
            raise FormatError(f"{path}: expected {count} vertices, found {len(rows)}")
        table = np.array(rows, dtype=float).reshape(count, len(props))
        cols = {name: table[:, idx] for idx, name in enumerate(names)}
    else:
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        if len(raw) - body_start < dtype.itemsize * count:
            raise FormatError(f"{path}: truncated binary body")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        cols = {name: arr[name].astype(float) for name in names}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1) if all(
        k in cols for k in ("nx", "ny", "nz")) else None
    curv = cols.get("curvature")
    return points, normals, curv


_DMAP_MAGIC = b"DMAP"


def write_depth_map(path, depth):
    """``DMAP`` magic, u32 width, u32 height, then float32 row-major; NaN = invalid."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DMAP_MAGIC + struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(depth).tobytes())


def read_depth_map(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != _DMAP_MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: bad DMAP header")
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} floats")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(float)


def dump_json(path, data):
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
