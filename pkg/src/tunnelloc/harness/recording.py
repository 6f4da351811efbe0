"""Binary frame recordings.

Layout: 4-byte magic, 1-byte version, then length-prefixed records. Each
record is a fixed little-endian header followed by float32 xyz and uint8
intensity arrays for the scan.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from ..geometry import Pose2D
from ..sim import Scan, SimFrame

MAGIC = b"TNLR"
VERSION = 1
_HEAD = struct.Struct("<d3dddB2ddd?I")
_LEN = struct.Struct("<I")


class RecordingError(ValueError):
    pass


def _pack(f: SimFrame) -> bytes:
    gps = f.gps if f.gps is not None else (np.nan, np.nan)
    heading = f.gps_heading if f.gps_heading is not None else np.nan
    n = len(f.scan)
    head = _HEAD.pack(
        f.t, f.truth.x, f.truth.y, f.truth.psi, f.dr_speed, f.dr_yaw_rate,
        f.gps is not None, float(gps[0]), float(gps[1]), heading, f.truth_s, f.in_tunnel, n,
    )
    xyz = np.ascontiguousarray(f.scan.xyz, dtype="<f4").tobytes()
    inten = np.clip(np.rint(f.scan.intensity), 0, 255).astype(np.uint8).tobytes()
    return head + xyz + inten


def _unpack(buf: bytes) -> SimFrame:
    t, x, y, psi, v, w, has_gps, gx, gy, gh, s, inside, n = _HEAD.unpack_from(buf)
    off = _HEAD.size
    if len(buf) != off + 13 * n:
        raise RecordingError("record length does not match its point count")
    xyz = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(float)
    inten = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + 12 * n).astype(float)
    gps = np.array([gx, gy]) if has_gps else None
    return SimFrame(
        t, Pose2D(x, y, psi), Scan(xyz, inten, t), v, w, gps,
        None if not has_gps else gh, s, bool(inside),
    )


def write_frames(fh: BinaryIO, frames: Iterable[SimFrame]) -> int:
    fh.write(MAGIC + bytes([VERSION]))
    count = 0
    for f in frames:
        rec = _pack(f)
        fh.write(_LEN.pack(len(rec)))
        fh.write(rec)
        count += 1
    return count


def read_frames(fh: BinaryIO) -> Iterator[SimFrame]:
    head = fh.read(5)
    if len(head) < 5 or head[:4] != MAGIC:
        raise RecordingError("not a frame recording (bad magic)")
    if head[4] != VERSION:
        raise RecordingError(f"unsupported recording version {head[4]}")
    while True:
        raw = fh.read(_LEN.size)
        if not raw:
            return
        if len(raw) < _LEN.size:
            raise RecordingError("truncated record length")
        (n,) = _LEN.unpack(raw)
        buf = fh.read(n)
        if len(buf) < n:
            raise RecordingError("truncated record")
        yield _unpack(buf)
