"""GTSR binary tensor encoding.

Layout (little-endian)::

    b"GTSR"  u32 version=1  u32 rank  u64 extent * rank  f64 element * prod(extents)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"GTSR"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    head = _HEAD.pack(MAGIC, VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if len(buf) - offset < _HEAD.size:
        raise FormatError("truncated GTSR header", field="header")
    magic, version, rank = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad GTSR magic {magic!r}", field="magic")
    if version != VERSION:
        raise FormatError(f"unsupported GTSR version {version}", field="version")
    pos = offset + _HEAD.size
    if len(buf) - pos < 8 * rank:
        raise FormatError("truncated GTSR extents", field="extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated GTSR payload: need {nbytes} bytes, have {len(buf) - pos}", field="payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    return arr, pos + nbytes


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        arr, end = decode(buf)
    except FormatError as exc:
        raise FormatError(str(exc), field=exc.field, path=path) from None
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after GTSR tensor", field="payload", path=path)
    return arr
