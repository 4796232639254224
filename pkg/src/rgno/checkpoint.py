"""Binary container for named parameter tensors.

Layout, all little-endian: magic ``RGNC``, u32 version, u32 tensor count, then
per tensor a u32 name length, the UTF-8 name, u32 rank, u32 extents, and the
values as 32-bit IEEE-754 floats in row-major order. Normalization statistics
ride along under the reserved ``stats/`` name prefix, configuration scalars
under ``config/``.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

__all__ = ["write_checkpoint", "read_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"RGNC"
VERSION = 1


def write_checkpoint(path: str, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise FormatError(f"truncated checkpoint: {what} at byte {offset}")
    return buf[offset : offset + count], offset + count


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, offset = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad magic {raw!r} at byte 0")
    raw, offset = _take(buf, offset, 8, "header")
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _take(buf, offset, 4, "name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, offset = _take(buf, offset, name_len, "name")
        name = raw.decode("utf-8")
        raw, offset = _take(buf, offset, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        raw, offset = _take(buf, offset, 4 * rank, "extents")
        shape = struct.unpack(f"<{rank}I", raw)
        n_values = int(np.prod(shape)) if rank else 1
        raw, offset = _take(buf, offset, 4 * n_values, f"values of {name!r}")
        named[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if offset != len(buf):
        raise FormatError(f"trailing bytes after tensor {count - 1} at byte {offset}")
    return named
