"""Input checks for the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .data import HEIGHT, WIDTH, SilhouetteSequence
from .errors import DimensionError


def check_sequences(X, height: int = HEIGHT, width: int = WIDTH, min_frames: int = 1) -> list[np.ndarray]:
    """Coerce ``X`` to a list of binary ``[K, height, width]`` uint8 arrays.

    ``X`` may be a ``[n, K, H, W]`` array, a list of ``[K, H, W]`` arrays
    (lengths may differ) or a list of SilhouetteSequence objects.
    """
    if isinstance(X, np.ndarray) and X.dtype != object:
        if X.ndim != 4:
            raise DimensionError("rank", 4, X.ndim, "check_sequences")
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError("expected at least one sequence")
    out = []
    for i, item in enumerate(items):
        frames = np.asarray(getattr(item, "frames", item))
        if frames.ndim != 3:
            raise DimensionError("rank", 3, frames.ndim, f"sequence {i}")
        if frames.shape[1:] != (height, width):
            raise DimensionError("height/width", (height, width), frames.shape[1:], f"sequence {i}")
        if frames.shape[0] < min_frames:
            raise DimensionError("time", f">= {min_frames}", frames.shape[0], f"sequence {i}")
        if frames.dtype.kind == "f" and not np.isfinite(frames).all():
            raise ValueError(f"sequence {i} has non-finite values")
        if not np.all((frames == 0) | (frames == 1)):
            raise ValueError(f"sequence {i} is not binary (0/1)")
        out.append(frames.astype(np.uint8))
    return out


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError("rank", 1, y.ndim, "labels")
    if y.shape[0] != n:
        raise DimensionError("samples", n, y.shape[0], "labels")
    return y


def as_silhouettes(frames: list[np.ndarray], labels=None, views=None) -> list[SilhouetteSequence]:
    labels = [None] * len(frames) if labels is None else labels
    views = [0] * len(frames) if views is None else views
    return [SilhouetteSequence(f, subject_id=str(lab), view_deg=int(v), seq_no=i + 1)
            for i, (f, lab, v) in enumerate(zip(frames, labels, views))]
