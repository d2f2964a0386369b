"""Trajectory file format.

Little-endian: ``b"RCTJ"``, u32 version, u64 start day, u64 T, V, H, W,
H float64 latitudes, then T*V*H*W float64 values in row-major (t-major) order.
"""
import struct

import numpy as np

from .grid import GridSpec, Trajectory

MAGIC = b"RCTJ"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQQQ")


class TrajectoryFormatError(ValueError):
    pass


def write_trajectory(path, traj):
    t = len(traj)
    v, h, w = traj.grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, traj.start_day, t, v, h, w))
        fh.write(np.asarray(traj.grid.latitudes, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def read_trajectory(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TrajectoryFormatError(f"{path}: expected magic {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TrajectoryFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    _, version, start, t, v, h, w = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}")
    n_vals = t * v * h * w
    expected = _HEADER.size + 8 * (h + n_vals)
    if len(blob) != expected:
        raise TrajectoryFormatError(f"{path}: expected {expected} bytes, found {len(blob)} (truncated or padded)")
    lats = np.frombuffer(blob, dtype="<f8", count=h, offset=_HEADER.size)
    data = np.frombuffer(blob, dtype="<f8", count=n_vals, offset=_HEADER.size + 8 * h)
    grid = GridSpec(h, w, tuple(lats.tolist()), v)
    return Trajectory(grid, start, data.astype(np.float64).reshape(t, v, h, w))
