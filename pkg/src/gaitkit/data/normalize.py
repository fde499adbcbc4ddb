"""Silhouette size normalization to the fixed 64x44 network input."""

from __future__ import annotations

import numpy as np

from .sequence import SilhouetteSequence

HEIGHT = 64
WIDTH = 44
_MAX_REFITS = 8


class EmptySequenceError(ValueError):
    """Every frame of a sequence is empty."""


def _resize(img: np.ndarray, scale: float, out_h: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel ``(i, j)`` samples input position ``(i / scale, j / scale)``,
    so the first and last rows map exactly onto the first and last input rows.
    """
    h, w = img.shape
    out_w = max(1, int(round((w - 1) * scale)) + 1)
    ys = np.minimum(np.arange(out_h) / scale, h - 1)
    xs = np.minimum(np.arange(out_w) / scale, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    rows = img[y0] * (1.0 - fy) + img[y1] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def _fit_height(frame: np.ndarray, height: int) -> np.ndarray:
    rows = np.flatnonzero(frame.any(axis=1))
    crop = frame[rows[0]: rows[-1] + 1].astype(np.float64)
    h = crop.shape[0]
    if h == height:
        return crop >= 0.5
    scale = (height - 1) / (h - 1) if h > 1 else float(height)
    return _resize(crop, scale, height) >= 0.5


def _window(out: np.ndarray, width: int) -> np.ndarray:
    """Width-``width`` window whose own foreground centroid rounds to the center column.

    Starts centered on the full-frame centroid; when the window clips the
    silhouette the clipped centroid can drift, so the window is re-centered
    on what it holds until that settles.
    """
    mass = out.sum(axis=0)
    cols = np.arange(out.shape[1])
    centroid = float((cols * mass).sum() / mass.sum())
    left = int(round(centroid)) - width // 2
    seen = set()
    while left not in seen:
        seen.add(left)
        lo, hi = max(left, 0), min(left + width, out.shape[1])
        held = mass[lo:hi]
        if held.sum() == 0:
            # centroid fell in a gap wider than the window: jump to the nearest foreground
            filled = np.flatnonzero(mass)
            left = int(filled[np.argmin(np.abs(filled - centroid))]) - width // 2
            continue
        shift = int(round(float(((cols[lo:hi] - left) * held).sum() / held.sum()))) - width // 2
        if shift == 0:
            break
        left += shift
    result = np.zeros((out.shape[0], width), dtype=np.uint8)
    lo, hi = max(left, 0), min(left + width, out.shape[1])
    if hi > lo:
        result[:, lo - left: hi - left] = out[:, lo:hi]
    return result


def _normalize_once(frame: np.ndarray, height: int, width: int) -> np.ndarray:
    out = _fit_height(frame, height)
    if not (out[0].any() and out[-1].any()):
        # thin top/bottom strokes lost when shrinking; an upscale keeps the edge rows
        out = _fit_height(out, height)
    return _window(out, width)


def normalize_frame(frame: np.ndarray, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray | None:
    """Crop, rescale and center one binary frame; ``None`` if it is empty.

    The result is re-normalized until it no longer changes (bounded), so
    normalizing an already normalized frame is a no-op.
    """
    frame = np.asarray(frame)
    if not frame.any():
        return None
    out = _normalize_once(frame, height, width)
    for _ in range(_MAX_REFITS):
        if not out.any():
            break
        again = _normalize_once(out, height, width)
        if np.array_equal(again, out):
            break
        out = again
    return out


def normalize(seq: SilhouetteSequence, height: int = HEIGHT, width: int = WIDTH) -> SilhouetteSequence:
    """Normalize every frame of ``seq``; empty frames are dropped."""
    frames = [normalize_frame(f, height, width) for f in seq.frames]
    kept = [f for f in frames if f is not None]
    if not kept:
        raise EmptySequenceError(f"sequence {seq.key} has no foreground in any frame")
    return SilhouetteSequence(
        frames=np.stack(kept),
        subject_id=seq.subject_id,
        condition=seq.condition,
        view_deg=seq.view_deg,
        seq_no=seq.seq_no,
        meta=dict(seq.meta, dropped_frames=len(frames) - len(kept)),
    )
