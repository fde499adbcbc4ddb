"""Checkpoint container: a JSON manifest followed by GTSR-encoded tensors.

Layout (little-endian)::

    b"GCKP"  u32 version=1  u64 manifest_bytes  manifest (UTF-8 JSON)  GTSR * len(manifest["tensors"])

The manifest lists tensor names in payload order, the generating
experiment configuration, and whatever resumable state the trainer adds.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import serialize

MAGIC = b"GCKP"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def encode_checkpoint(manifest: dict, tensors: dict[str, np.ndarray]) -> bytes:
    manifest = dict(manifest, tensors=list(tensors))
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts = [_HEAD.pack(MAGIC, VERSION, len(body)), body]
    parts.extend(serialize.encode(arr) for arr in tensors.values())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path=None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated checkpoint header", field="header", path=path)
    magic, version, size = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", field="magic", path=path)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", field="version", path=path)
    start = _HEAD.size
    if len(buf) < start + size:
        raise FormatError("truncated checkpoint manifest", field="manifest", path=path)
    try:
        manifest = json.loads(buf[start:start + size].decode())
        names = list(manifest["tensors"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError):
        raise FormatError("unreadable checkpoint manifest", field="manifest", path=path) from None
    pos = start + size
    tensors = {}
    for name in names:
        try:
            arr, pos = serialize.decode(buf, pos)
        except FormatError as exc:
            raise FormatError(f"tensor {name!r}: {exc}", field=exc.field, path=path) from None
        tensors[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", field="payload", path=path)
    return manifest, tensors


def save_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(manifest, tensors))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes(), path)
