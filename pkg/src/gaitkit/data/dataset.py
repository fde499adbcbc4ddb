"""On-disk dataset tree and its ``index.json``."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .normalize import normalize
from .sequence import SilhouetteSequence, load_sequence

INDEX_NAME = "index.json"
INDEX_VERSION = 1


@dataclass(frozen=True)
class SequenceEntry:
    subject: str
    condition: str
    seq_no: int
    view: int
    path: str
    num_frames: int = 0


@dataclass
class DatasetIndex:
    entries: list
    split: dict
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        train = set(self.split.get("train", []))
        test = set(self.split.get("test", []))
        overlap = train & test
        if overlap:
            raise FormatError(f"subjects in both train and test splits: {sorted(overlap)}", field="split")

    def subjects(self, split: str | None = None) -> list[str]:
        if split is None or split == "all":
            return sorted({e.subject for e in self.entries})
        if split not in self.split:
            raise KeyError(f"unknown split {split!r}")
        return list(self.split[split])

    def select(self, split: str | None = None) -> list[SequenceEntry]:
        wanted = set(self.subjects(split))
        return [e for e in self.entries if e.subject in wanted]

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "layout": "<subject>/<condition>-<seq>/<view>/seq.gseq",
            "entries": [asdict(e) for e in self.entries],
            "split": {k: list(v) for k, v in self.split.items()},
            **self.extra,
        }

    def write(self, root=None) -> Path:
        root = Path(root or self.root)
        path = root / INDEX_NAME
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetIndex":
        root = Path(root)
        path = root / INDEX_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no {INDEX_NAME} under {root}")
        doc = json.loads(path.read_text())
        if doc.get("version") != INDEX_VERSION:
            raise FormatError(f"unsupported index version {doc.get('version')!r}", field="version", path=path)
        try:
            entries = [SequenceEntry(**e) for e in doc["entries"]]
            split = doc["split"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed index: {exc}", field="entries", path=path) from None
        extra = {k: v for k, v in doc.items() if k not in ("version", "layout", "entries", "split")}
        return cls(entries=entries, split=split, root=root, extra=extra)

    def load_entry(self, entry: SequenceEntry) -> SilhouetteSequence:
        return load_sequence(Path(self.root) / entry.path, subject_id=entry.subject,
                             condition=entry.condition, seq_no=entry.seq_no, view_deg=entry.view)


class SequenceStore:
    """Normalized sequences of one split, held in memory.

    ``frames[i]`` is a float64 array ``[K, 64, 44]``; ``labels[i]`` the
    integer class of the subject within the split.
    """

    def __init__(self, sequences: list[SilhouetteSequence]):
        self.sequences = sequences
        self.subjects = sorted({s.subject_id for s in sequences})
        lookup = {s: i for i, s in enumerate(self.subjects)}
        self.labels = np.array([lookup[s.subject_id] for s in sequences], dtype=np.intp)
        self.frames = [s.frames.astype(np.float64) for s in sequences]
        self.by_label = [np.flatnonzero(self.labels == c) for c in range(len(self.subjects))]

    def __len__(self) -> int:
        return len(self.sequences)

    @classmethod
    def from_index(cls, index: DatasetIndex, split: str | None = "train", threads: int = 1) -> "SequenceStore":
        entries = index.select(split)
        if not entries:
            raise ValueError(f"split {split!r} has no sequences")

        def work(entry):
            return normalize(index.load_entry(entry))

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                seqs = list(pool.map(work, entries))
        else:
            seqs = [work(e) for e in entries]
        return cls(seqs)
