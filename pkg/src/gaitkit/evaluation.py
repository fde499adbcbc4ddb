"""Cross-view rank-1 evaluation with identical-view exclusion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import no_grad


@dataclass
class EvalProtocol:
    """Which sequences form the gallery and the probes.

    The gallery is ``gallery_condition`` walks numbered ``gallery_seqs``; every
    other walk whose condition is listed in ``probe_conditions`` is a probe.
    """

    split: str = "test"
    gallery_condition: str = "NM"
    gallery_seqs: list = field(default_factory=lambda: [1, 2, 3, 4])
    probe_conditions: list = field(default_factory=lambda: ["NM", "BG", "CL"])
    exclude_identical_view: bool = True
    normalize: bool = False
    batch_size: int = 16

    def __post_init__(self):
        if not self.gallery_seqs:
            raise ConfigError("gallery_seqs must be non-empty")
        if not self.probe_conditions:
            raise ConfigError("probe_conditions must be non-empty")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def is_gallery(self, condition: str, seq_no: int) -> bool:
        return condition == self.gallery_condition and seq_no in self.gallery_seqs

    def is_probe(self, condition: str, seq_no: int) -> bool:
        return condition in self.probe_conditions and not self.is_gallery(condition, seq_no)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalProtocol":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class EmbeddingTable:
    """One row per sequence: concatenated part embeddings plus metadata."""

    embeddings: np.ndarray
    subjects: list
    conditions: list
    views: list
    seq_nos: list

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = self.embeddings.shape[0]
        if self.embeddings.ndim != 2:
            raise DimensionError("rank", 2, self.embeddings.ndim, "EmbeddingTable")
        for name in ("subjects", "conditions", "views", "seq_nos"):
            if len(getattr(self, name)) != n:
                raise DimensionError(name, n, len(getattr(self, name)), "EmbeddingTable")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def subset(self, rows) -> "EmbeddingTable":
        rows = list(rows)
        return EmbeddingTable(self.embeddings[rows], [self.subjects[i] for i in rows],
                              [self.conditions[i] for i in rows], [self.views[i] for i in rows],
                              [self.seq_nos[i] for i in rows])

    def split(self, protocol: EvalProtocol) -> tuple["EmbeddingTable", "EmbeddingTable"]:
        gal = [i for i in range(len(self)) if protocol.is_gallery(self.conditions[i], self.seq_nos[i])]
        prb = [i for i in range(len(self)) if protocol.is_probe(self.conditions[i], self.seq_nos[i])]
        return self.subset(gal), self.subset(prb)


def embed_all(model, sequences, protocol: EvalProtocol | None = None) -> EmbeddingTable:
    """Eval-mode embeddings of full (uncropped) sequences.

    ``sequences`` is a list of normalized SilhouetteSequence objects (or a
    SequenceStore). Sequences of equal length are batched together; the
    result does not depend on the batch size.
    """
    protocol = protocol or EvalProtocol()
    seqs = list(getattr(sequences, "sequences", sequences))
    was_training = model.training
    model.eval()
    out: list[np.ndarray | None] = [None] * len(seqs)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(s.frames.shape[0], []).append(i)
    try:
        with no_grad():
            for k in sorted(by_len):
                rows = by_len[k]
                for start in range(0, len(rows), protocol.batch_size):
                    chunk = rows[start:start + protocol.batch_size]
                    x = np.stack([seqs[i].frames for i in chunk]).astype(np.float64)[:, None]
                    emb = model(x).flat()
                    for i, e in zip(chunk, emb):
                        out[i] = e
    finally:
        model.train(was_training)
    emb = np.stack(out) if out else np.zeros((0, 0))
    if protocol.normalize and emb.size:
        emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return EmbeddingTable(emb, [s.subject_id for s in seqs], [s.condition for s in seqs],
                          [int(s.view_deg) for s in seqs], [int(s.seq_no) for s in seqs])


@dataclass
class RankReport:
    views: list
    conditions: list
    accuracy: np.ndarray   # [view, condition], NaN where a cell has no probes
    probes: np.ndarray     # [view, condition] probe counts that were ranked
    skipped: int = 0

    @property
    def condition_means(self) -> dict[str, float]:
        out = {}
        for j, c in enumerate(self.conditions):
            col = self.accuracy[:, j]
            col = col[~np.isnan(col)]
            out[c] = float(col.mean()) if col.size else float("nan")
        return out

    @property
    def mean(self) -> float:
        vals = [v for v in self.condition_means.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        def clean(x):
            return None if math.isnan(x) else round(float(x), 10)

        return {
            "views": [int(v) for v in self.views],
            "conditions": list(self.conditions),
            "accuracy": [[clean(x) for x in row] for row in self.accuracy],
            "probes": self.probes.astype(int).tolist(),
            "condition_mean": {c: clean(v) for c, v in self.condition_means.items()},
            "mean": clean(self.mean),
            "skipped": int(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Fixed-layout table: one row per condition, one column per probe view."""
        head = f"{'Probe':<6}" + "".join(f"{v:>8d}" for v in self.views) + f"{'Mean':>8}"
        lines = [head, "-" * len(head)]
        means = self.condition_means
        for j, c in enumerate(self.conditions):
            cells = "".join(_fmt(self.accuracy[i, j]) for i in range(len(self.views)))
            lines.append(f"{c:<6}" + cells + _fmt(means[c]))
        lines.append("-" * len(head))
        lines.append(f"{'Mean':<6}" + " " * (8 * len(self.views)) + _fmt(self.mean))
        if self.skipped:
            lines.append(f"skipped probes: {self.skipped}")
        return "\n".join(lines) + "\n"

    def heat_strip(self, cell: int = 8) -> bytes:
        """Binary PGM of the view x condition matrix (accuracy 0..100 -> 0..255)."""
        acc = np.nan_to_num(self.accuracy.T, nan=0.0)
        img = np.rint(acc * 2.55).astype(np.uint8)
        img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
        return pgm_bytes(img)

    def write(self, path, heat_strip: bool = False) -> list[Path]:
        """Write ``<path>.txt`` and ``<path>.json`` (and ``<path>.pgm``)."""
        base = Path(path)
        if base.suffix in (".json", ".txt"):
            base = base.with_suffix("")
        written = [base.with_suffix(".txt"), base.with_suffix(".json")]
        written[0].write_text(self.to_text())
        written[1].write_text(self.to_json())
        if heat_strip:
            written.append(base.with_suffix(".pgm"))
            written[-1].write_bytes(self.heat_strip())
        return written


def _fmt(x: float) -> str:
    return f"{'-':>8}" if math.isnan(x) else f"{x:8.1f}"


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def nearest(gallery: np.ndarray, probe: np.ndarray) -> int:
    """Index of the closest gallery row (Euclidean); ties go to the lowest index."""
    d = np.sqrt(((gallery - probe) ** 2).sum(axis=1))
    return int(np.argmin(d))


def rank1(gallery: EmbeddingTable, probe: EmbeddingTable, protocol: EvalProtocol | None = None) -> RankReport:
    """Rank-1 accuracy per (probe view, probe condition) cell.

    Gallery rows sharing the probe's view are ignored when the protocol
    excludes identical views. Probes left with no candidate are skipped and
    tallied.
    """
    protocol = protocol or EvalProtocol()
    if gallery.embeddings.shape[1:] != probe.embeddings.shape[1:] and len(gallery) and len(probe):
        raise DimensionError("embedding", gallery.embeddings.shape[1:], probe.embeddings.shape[1:], "rank1")
    views = sorted(set(probe.views))
    conditions = [c for c in protocol.probe_conditions if c in set(probe.conditions)]
    hits = np.zeros((len(views), len(conditions)))
    counts = np.zeros((len(views), len(conditions)))
    gviews = np.asarray(gallery.views)
    skipped = 0
    for i in range(len(probe)):
        v, c = probe.views[i], probe.conditions[i]
        if c not in conditions:
            continue
        cand = np.flatnonzero(gviews != v) if protocol.exclude_identical_view else np.arange(len(gallery))
        if cand.size == 0:
            skipped += 1
            continue
        j = cand[nearest(gallery.embeddings[cand], probe.embeddings[i])]
        r, k = views.index(v), conditions.index(c)
        counts[r, k] += 1
        hits[r, k] += gallery.subjects[j] == probe.subjects[i]
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, 100.0 * hits / np.maximum(counts, 1), np.nan)
    return RankReport(views=views, conditions=conditions, accuracy=acc, probes=counts, skipped=skipped)


def evaluate(model, sequences, protocol: EvalProtocol | None = None) -> RankReport:
    """Embed ``sequences`` and rank probes against the gallery."""
    protocol = protocol or EvalProtocol()
    table = embed_all(model, sequences, protocol)
    gallery, probe = table.split(protocol)
    return rank1(gallery, probe, protocol)
