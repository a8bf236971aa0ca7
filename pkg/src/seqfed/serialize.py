"""Named-buffer flat serialization for sub-network parameters.

Layout (all integers little-endian uint32):
  count
  repeated count times:
    name_len, name (utf-8), rows, cols, rows*cols float64 little-endian
  crc32 of everything preceding

1-d buffers (biases) are stored as a single row.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .cells import SubNetworkParams


class FormatError(ValueError):
    pass


def dump_buffers(buffers) -> bytes:
    items = list(buffers.items() if isinstance(buffers, dict) else buffers)
    out = bytearray(struct.pack("<I", len(items)))
    for name, arr in items:
        a = np.asarray(arr, dtype="<f8")
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise FormatError(f"buffer {name!r} is {a.ndim}-d")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<II", a.shape[0], a.shape[1])
        out += a.tobytes(order="C")
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def load_buffers(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if len(blob) < 8:
        raise FormatError("truncated buffer file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("CRC32 mismatch")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise FormatError("truncated buffer file")
        chunk = body[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    items = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols)
        items.append((name, arr.astype(np.float64).copy()))
    if off != len(body):
        raise FormatError("trailing bytes after last buffer")
    return items


def save_params(params: SubNetworkParams, path) -> None:
    with open(path, "wb") as f:
        f.write(dump_buffers(params.buffers))


def load_params_into(params: SubNetworkParams, path) -> None:
    """Load buffers from `path` into an existing, shape-congruent params record."""
    with open(path, "rb") as f:
        items = load_buffers(f.read())
    for name, arr in items:
        tgt = params.buffers.get(name)
        if tgt is None:
            raise FormatError(f"unknown buffer {name!r}")
        params.buffers[name] = arr.reshape(tgt.shape)
