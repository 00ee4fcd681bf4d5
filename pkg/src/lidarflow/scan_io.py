"""Point cloud file I/O: velodyne-style binary, PLY (ascii and binary
little-endian) and whitespace xyz text."""

import struct

import numpy as np

from .errors import MalformedFile, TruncatedRecord

FORMATS = ("kitti_bin", "ply", "xyz_text")


def load_scan(path, fmt):
    """Load an (n, 3) cloud from one of the supported formats."""
    if fmt == "kitti_bin":
        return _load_kitti_bin(path)
    if fmt == "ply":
        return _load_ply(path)
    if fmt == "xyz_text":
        return _load_xyz_text(path)
    raise ValueError(f"unknown scan format {fmt!r}; choose from {FORMATS}")


def save_scan(points, path, fmt, ply_binary=True):
    pts = np.asarray(points, dtype=np.float64)
    if fmt == "kitti_bin":
        quad = np.zeros((len(pts), 4), dtype="<f4")
        quad[:, :3] = pts
        quad.tofile(path)
    elif fmt == "ply":
        _save_ply(pts, path, binary=ply_binary)
    elif fmt == "xyz_text":
        np.savetxt(path, pts, fmt="%.17g")
    else:
        raise ValueError(f"unknown scan format {fmt!r}; choose from {FORMATS}")


def _load_kitti_bin(path):
    """Consecutive little-endian float32 (x, y, z, intensity) records."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 16 != 0:
        raise TruncatedRecord(
            "file size is not a multiple of 16-byte records",
            offset=len(raw) - len(raw) % 16,
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return data[:, :3].astype(np.float64)


def _load_xyz_text(path):
    rows = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise MalformedFile(f"line {lineno}: expected 3 coordinates")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError:
                raise MalformedFile(f"line {lineno}: non-numeric coordinate")
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _save_ply(pts, path, binary):
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        pts32 = pts.astype("<f4")
        if binary:
            f.write(pts32.tobytes())
        else:
            for p in pts32:
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n".encode("ascii"))


_PLY_SIZES = {
    "char": 1, "uchar": 1, "int8": 1, "uint8": 1,
    "short": 2, "ushort": 2, "int16": 2, "uint16": 2,
    "int": 4, "uint": 4, "int32": 4, "uint32": 4, "float": 4, "float32": 4,
    "double": 8, "float64": 8,
}


def _load_ply(path):
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"ply"):
        raise MalformedFile("missing 'ply' magic", offset=0)
    header_end = raw.find(b"end_header")
    if header_end < 0:
        raise MalformedFile("missing end_header")
    body_start = raw.find(b"\n", header_end) + 1
    if body_start == 0:
        raise TruncatedRecord("header not terminated", offset=len(raw))
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()

    fmt = None
    n_vertex = None
    props = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append((tok[1], tok[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedFile(f"unsupported ply format {fmt!r}")
    if n_vertex is None:
        raise MalformedFile("no vertex element in header")
    names = [p[1] for p in props]
    try:
        cols = [names.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise MalformedFile("ply vertex element lacks x/y/z properties")

    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii", errors="replace").splitlines()
        if len(lines) < n_vertex:
            raise TruncatedRecord(
                f"expected {n_vertex} vertex lines, found {len(lines)}",
                offset=len(raw),
            )
        out = np.empty((n_vertex, 3))
        for i in range(n_vertex):
            parts = lines[i].split()
            if len(parts) < len(props):
                raise MalformedFile(f"vertex line {i}: too few values")
            try:
                out[i] = [float(parts[c]) for c in cols]
            except ValueError:
                raise MalformedFile(f"vertex line {i}: non-numeric value")
        return out

    # binary little-endian
    sizes = [_PLY_SIZES.get(t) for t, _ in props]
    if any(s is None for s in sizes):
        bad = props[sizes.index(None)][0]
        raise MalformedFile(f"unsupported property type {bad!r}")
    stride = sum(sizes)
    need = n_vertex * stride
    if len(raw) - body_start < need:
        raise TruncatedRecord(
            f"vertex data needs {need} bytes, have {len(raw) - body_start}",
            offset=len(raw),
        )
    offsets = np.cumsum([0] + sizes[:-1])
    out = np.empty((n_vertex, 3))
    body = raw[body_start : body_start + need]
    for k, c in enumerate(cols):
        typ = props[c][0]
        if typ in ("float", "float32"):
            dt = "<f4"
        elif typ in ("double", "float64"):
            dt = "<f8"
        else:
            raise MalformedFile(f"coordinate property {props[c][1]} is not float")
        col = np.ndarray(
            (n_vertex,), dtype=dt, buffer=body,
            offset=int(offsets[c]), strides=(stride,),
        )
        out[:, k] = col
    return out
