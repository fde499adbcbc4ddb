"""Batch-all triplet loss plus softmax cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    mean,
    mul,
    pairwise_distance,
    relu,
    reshape,
    softmax_cross_entropy,
    sub,
    tsum,
    transpose,
)

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    margin: float = 0.2
    triplet_weight: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.triplet_weight < 0 or self.ce_weight < 0:
            raise ConfigError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: Tensor
    triplet: Tensor
    ce: Tensor

    def values(self) -> dict[str, float]:
        return {"loss": float(self.total.data), "triplet": float(self.triplet.data),
                "ce": float(self.ce.data)}


def _labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError("labels", (n,), labels.shape, "loss")
    return labels


def triplet_mask(labels) -> np.ndarray:
    """``mask[a, p, n]`` is 1 for every valid (anchor, positive, negative) triple."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    return (pos[:, :, None] & ~same[:, None, :]).astype(np.float64)


def triplet_loss(parts, labels, cfg: LossConfig | None = None) -> Tensor:
    """Batch-all hinge ``max(0, d(a,p) - d(a,n) + margin)`` per part.

    Each part averages over its nonzero terms (0 when none are), then the
    parts are averaged. ``parts`` is ``[N, P, D]``.
    """
    cfg = cfg or LossConfig()
    parts = as_tensor(parts)
    if parts.ndim != 3:
        raise DimensionError("rank", 3, parts.ndim, "triplet_loss")
    n, p, _ = parts.shape
    labels = _labels(labels, n)
    if np.unique(labels).size < 2:
        log.warning("triplet loss: batch has a single class, no valid negatives")
        return Tensor(np.array(0.0))
    mask = triplet_mask(labels)
    d = pairwise_distance(transpose(parts, (1, 0, 2)))            # [P, N, N]
    terms = add(sub(reshape(d, (p, n, n, 1)), reshape(d, (p, n, 1, n))), cfg.margin)
    hinge = mul(relu(terms), mask)                                # [P, a, p, n]
    per_part = tsum(hinge, axis=(1, 2, 3))
    counts = ((terms.data > 0) & (mask > 0)).sum(axis=(1, 2, 3))
    return mean(mul(per_part, 1.0 / np.maximum(counts, 1)))


def ce_loss(logits, labels) -> Tensor:
    """Softmax cross-entropy averaged over samples and parts; ``logits`` is ``[N, P, K]``."""
    logits = as_tensor(logits)
    if logits.ndim != 3:
        raise DimensionError("rank", 3, logits.ndim, "ce_loss")
    labels = _labels(labels, logits.shape[0])
    return softmax_cross_entropy(logits, np.broadcast_to(labels[:, None], logits.shape[:2]))


def combined(parts, logits, labels, cfg: LossConfig | None = None) -> LossBreakdown:
    cfg = cfg or LossConfig()
    tri = triplet_loss(parts, labels, cfg)
    ce = ce_loss(logits, labels)
    total = add(mul(tri, cfg.triplet_weight), mul(ce, cfg.ce_weight))
    return LossBreakdown(total=total, triplet=tri, ce=ce)
