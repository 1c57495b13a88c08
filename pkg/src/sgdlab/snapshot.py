"""CSV and binary snapshot files for ensembles and grid densities.

Binary layout (little-endian)::

    b"SGDT"  u8 version  u8 kind
    kind 0 (ensemble): u32 T, u32 M, u32 d, T doubles (times), T*M*d doubles
    kind 1 (grid):     u8 ndim, ndim u32 sizes, 1 double (time),
                       axis centers (sum of sizes doubles), prod(sizes) doubles
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SGDT"
VERSION = 1
FLOAT_FMT = "%.17g"


class SnapshotFormatError(ValueError):
    pass


def write_csv(path, header, rows):
    """Write a numeric table with 17 significant digits."""
    rows = np.asarray(rows, dtype=float)
    np.savetxt(path, rows.reshape(len(rows), -1), delimiter=",", header=",".join(header),
               comments="", fmt=FLOAT_FMT)


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_ensemble(path, times, positions):
    times = np.ascontiguousarray(times, dtype="<f8")
    pos = np.ascontiguousarray(positions, dtype="<f8")
    T, M, d = pos.shape
    if times.shape != (T,):
        raise ValueError("times and positions disagree")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<BB", VERSION, 0) + struct.pack("<III", T, M, d))
        fh.write(times.tobytes())
        fh.write(pos.tobytes())


def _header(buf, kind):
    if buf[:4] != MAGIC:
        raise SnapshotFormatError("bad magic")
    version, k = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported version {version}")
    if k != kind:
        raise SnapshotFormatError(f"expected kind {kind}, found {k}")
    return 6


def read_ensemble(path):
    buf = open(path, "rb").read()
    off = _header(buf, 0)
    T, M, d = struct.unpack_from("<III", buf, off)
    off += 12
    times = np.frombuffer(buf, "<f8", T, off)
    off += 8 * T
    pos = np.frombuffer(buf, "<f8", T * M * d, off).reshape(T, M, d)
    return times.copy(), pos.copy()


def write_grid(path, axes, values, t):
    values = np.ascontiguousarray(values, dtype="<f8")
    sizes = [len(a) for a in axes]
    if tuple(sizes) != values.shape:
        raise ValueError("axes and values disagree")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<BB", VERSION, 1) + struct.pack("<B", len(sizes)))
        fh.write(struct.pack("<" + "I" * len(sizes), *sizes))
        fh.write(struct.pack("<d", float(t)))
        for a in axes:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        fh.write(values.tobytes())


def read_grid(path):
    buf = open(path, "rb").read()
    off = _header(buf, 1)
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    sizes = struct.unpack_from("<" + "I" * ndim, buf, off)
    off += 4 * ndim
    (t,) = struct.unpack_from("<d", buf, off)
    off += 8
    axes = []
    for n in sizes:
        axes.append(np.frombuffer(buf, "<f8", n, off).copy())
        off += 8 * n
    values = np.frombuffer(buf, "<f8", int(np.prod(sizes)), off).reshape(sizes).copy()
    return axes, values, t
