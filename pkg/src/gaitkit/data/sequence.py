"""Silhouette sequences and the GSEQ binary file format."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

CONDITIONS = ("NM", "BG", "CL")

GSEQ_MAGIC = b"GSEQ"
GSEQ_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

_COND_DIR = re.compile(r"^(NM|BG|CL)-(\d+)$")


@dataclass(eq=False)
class SilhouetteSequence:
    """K binary frames of one walk plus identity/condition/view metadata.

    ``frames`` is a ``uint8`` array ``[K, H, W]`` holding only 0 and 1.
    ``seq_no`` distinguishes repeated walks under the same condition
    (``NM-01`` ... ``NM-06`` in CASIA-B terms).
    """

    frames: np.ndarray
    subject_id: str = "unknown"
    condition: str = "NM"
    view_deg: int = 0
    seq_no: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError(f"frames must be [K, H, W], got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")
        if frames.dtype != np.uint8:
            if not np.all((frames == 0) | (frames == 1)):
                raise ValueError("silhouette frames must be binary (0/1)")
            frames = frames.astype(np.uint8)
        elif frames.max(initial=0) > 1:
            raise ValueError("silhouette frames must be binary (0/1)")
        self.frames = frames
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        self.view_deg = int(self.view_deg) % 360

    def __eq__(self, other) -> bool:
        if not isinstance(other, SilhouetteSequence):
            return NotImplemented
        return self.key == other.key and np.array_equal(self.frames, other.frames)

    __hash__ = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.subject_id, self.condition, self.seq_no, self.view_deg)


def condition_dirname(condition: str, seq_no: int) -> str:
    return f"{condition}-{seq_no:02d}"


def parse_condition_dirname(name: str) -> tuple[str, int]:
    m = _COND_DIR.match(name)
    if not m:
        raise FormatError(f"condition directory {name!r} is not of the form NM-01/BG-01/CL-01", field="path")
    return m.group(1), int(m.group(2))


def sequence_relpath(subject: str, condition: str, seq_no: int, view_deg: int) -> str:
    return f"{subject}/{condition_dirname(condition, seq_no)}/{view_deg:03d}/seq.gseq"


def encode_gseq(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    k, h, w = frames.shape
    payload = (frames.astype(np.uint8) * 255).tobytes(order="C")
    return _HEADER.pack(GSEQ_MAGIC, GSEQ_VERSION, k, h, w) + payload


def decode_gseq(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated GSEQ header ({len(buf)} bytes)", field="header", path=path)
    magic, version, k, h, w = _HEADER.unpack_from(buf)
    if magic != GSEQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GSEQ_MAGIC!r}", field="magic", path=path)
    if version != GSEQ_VERSION:
        raise FormatError(f"unsupported GSEQ version {version}", field="version", path=path)
    if k == 0 or h == 0 or w == 0:
        raise FormatError(f"zero extent in header (K={k}, H={h}, W={w})", field="extents", path=path)
    expected = k * h * w
    got = len(buf) - _HEADER.size
    if got < expected:
        raise FormatError(f"truncated payload: {got} of {expected} bytes", field="payload", path=path)
    if got > expected:
        raise FormatError(f"payload has {got - expected} bytes beyond K*H*W={expected}", field="extents", path=path)
    raw = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(k, h, w)
    bad = (raw != 0) & (raw != 255)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FormatError(f"payload value {int(raw[first])} at {first} is not 0 or 255", field="payload", path=path)
    return (raw == 255).astype(np.uint8)


def _metadata_from_path(path: Path) -> dict:
    """Recover subject/condition/seq/view from ``<subject>/<COND-NN>/<view>/seq.gseq``."""
    parts = path.parts
    if len(parts) < 4:
        return {}
    try:
        condition, seq_no = parse_condition_dirname(parts[-3])
        view = int(parts[-2])
    except (FormatError, ValueError):
        return {}
    return {"subject_id": parts[-4], "condition": condition, "seq_no": seq_no, "view_deg": view}


def save_sequence(seq: SilhouetteSequence, path) -> None:
    """Write the frames of ``seq`` as a GSEQ file.

    GSEQ carries no metadata; it is recovered from the dataset-tree path on
    load.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_gseq(seq.frames))


def load_sequence(path, **metadata) -> SilhouetteSequence:
    """Read a GSEQ file.

    Metadata is taken from the dataset-tree path when it follows the layout;
    keyword arguments supply or must agree with it.
    """
    path = Path(path)
    frames = decode_gseq(path.read_bytes(), path=path)
    meta = _metadata_from_path(path)
    for key, value in metadata.items():
        if value is None:
            continue
        if key in meta and meta[key] != value:
            raise FormatError(f"metadata mismatch for {key}: path says {meta[key]!r}, caller says {value!r}",
                              field=key, path=path)
        meta[key] = value
    return SilhouetteSequence(frames=frames, **meta)
