"""Silhouette-level motion: clip-wise max-minus-min masks and the shallow motion branch.

A sequence of K frames is cut into clips of L frames. Within a clip the
per-pixel range (max minus min over time) marks the pixels that changed;
multiplying every frame of the clip by that mask keeps only the moving
parts of the silhouette. The masked clips are averaged (or max-pooled) over
time, and one 3-D convolution turns the result into the motion feature that
is concatenated with the appearance feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, concat, leaky_relu, mul, reduce, reshape, sub, take
from .tensor import conv3d, ConvKernel

TAIL_POLICIES = ("drop", "pad_repeat_last")
AGGREGATIONS = ("mean", "max")


@dataclass
class SimoConfig:
    clip_len: int = 4
    aggregation: str = "mean"
    motion_channels: int = 8
    tail_policy: str = "drop"

    def __post_init__(self):
        if self.clip_len < 2:
            raise ConfigError(f"clip_len must be >= 2, got {self.clip_len}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.tail_policy not in TAIL_POLICIES:
            raise ConfigError(f"tail_policy must be one of {TAIL_POLICIES}")
        if self.motion_channels < 1:
            raise ConfigError("motion_channels must be >= 1")


@dataclass
class ClipPartition:
    clips: np.ndarray  # [num_clips, L, H, W]
    clip_len: int
    tail_policy: str

    @property
    def num_clips(self) -> int:
        return self.clips.shape[0]


@dataclass
class MotionSequence:
    masks: np.ndarray          # [num_clips, H, W]
    motion_frames: np.ndarray  # [num_clips * L, H, W]
    aggregated: np.ndarray     # [num_clips, H, W]
    clip_len: int

    @property
    def num_clips(self) -> int:
        return self.masks.shape[0]


def num_clips(num_frames: int, clip_len: int, tail_policy: str = "drop") -> int:
    if tail_policy == "drop":
        return num_frames // clip_len
    return -(-num_frames // clip_len)


def _tail_indices(num_frames: int, clip_len: int, tail_policy: str) -> np.ndarray:
    n = num_clips(num_frames, clip_len, tail_policy)
    if n == 0:
        raise DimensionError("time", f">= {clip_len} frames (clip length)", num_frames, "simo")
    idx = np.arange(n * clip_len)
    return np.minimum(idx, num_frames - 1)


def partition_clips(frames, clip_len: int, tail_policy: str = "drop") -> ClipPartition:
    """Cut ``[K, H, W]`` into ``[num_clips, L, H, W]``."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DimensionError("rank", 3, frames.ndim, "partition_clips")
    if clip_len < 1:
        raise ConfigError("clip_len must be >= 1")
    idx = _tail_indices(frames.shape[0], clip_len, tail_policy)
    clips = frames[idx].reshape(-1, clip_len, *frames.shape[1:])
    return ClipPartition(clips=clips, clip_len=clip_len, tail_policy=tail_policy)


def compute_motion_mask(clip):
    """Per-pixel range over the time axis (third from last): max minus min.

    Accepts ``[L, H, W]`` or any batch of clips ``[..., L, H, W]``. A numpy
    input yields a numpy result; a Tensor input stays differentiable.
    """
    t = as_tensor(clip)
    if t.ndim < 3:
        raise DimensionError("rank", ">= 3", t.ndim, "compute_motion_mask")
    mask = sub(reduce(t, -3, "max"), reduce(t, -3, "min"))
    return mask if isinstance(clip, Tensor) else mask.data


def _frames_of(seq):
    frames = getattr(seq, "frames", seq)
    return np.asarray(frames, dtype=np.float64)


def build_motion_sequence(seq, cfg: SimoConfig | None = None) -> MotionSequence:
    """Masks, masked motion frames and per-clip aggregates of one sequence.

    ``seq`` is a SilhouetteSequence or a ``[K, H, W]`` array; it is not
    modified.
    """
    cfg = cfg or SimoConfig()
    part = partition_clips(_frames_of(seq), cfg.clip_len, cfg.tail_policy)
    clips = part.clips
    masks = clips.max(axis=1) - clips.min(axis=1)
    motion = masks[:, None] * clips
    seqm = MotionSequence(masks=masks, motion_frames=motion.reshape(-1, *clips.shape[2:]),
                          aggregated=np.empty(0), clip_len=cfg.clip_len)
    seqm.aggregated = aggregate_clips(seqm, cfg.aggregation)
    return seqm


def aggregate_clips(m: MotionSequence, mode: str = "mean") -> np.ndarray:
    """Collapse each clip of ``m.motion_frames`` over time by mean or max."""
    if mode not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
    clips = m.motion_frames.reshape(-1, m.clip_len, *m.motion_frames.shape[1:])
    return clips.mean(axis=1) if mode == "mean" else clips.max(axis=1)


def motion_input(x, cfg: SimoConfig) -> Tensor:
    """Batched, differentiable SiMo input stage.

    ``x`` is ``[N, 1, K, H, W]``; returns the aggregated motion sequence
    ``[N, 1, num_clips, H, W]``.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError("rank", 5, x.ndim, "motion_input")
    n, c, k, h, w = x.shape
    idx = _tail_indices(k, cfg.clip_len, cfg.tail_policy)
    if idx.size != k or not np.array_equal(idx, np.arange(k)):
        x = take(x, idx, axis=2)
    nc = idx.size // cfg.clip_len
    clips = reshape(x, (n, c, nc, cfg.clip_len, h, w))
    mask = compute_motion_mask(clips)                      # [N, C, nc, H, W]
    motion = mul(reshape(mask, (n, c, nc, 1, h, w)), clips)
    return reduce(motion, 3, cfg.aggregation)


def extract_motion_feature(aggregated, kernel: ConvKernel, negative_slope: float = 0.01) -> Tensor:
    """3-D convolution (same padding) plus leaky ReLU over ``[N, 1, num_clips, H, W]``."""
    return leaky_relu(conv3d(aggregated, kernel, "same"), negative_slope)


def temporal_index(t_long: int, t_short: int, clip_len: int | None = None) -> np.ndarray:
    """Source step in the short stream for every step of the long one.

    Without ``clip_len`` the short stream is spread evenly,
    ``floor(t * t_short / t_long)``. With it, step ``t`` maps to the clip
    holding frame ``t`` (``t // clip_len``); frames past the last whole clip
    reuse that clip.
    """
    if clip_len is None:
        return (np.arange(t_long) * t_short) // t_long
    return np.minimum(np.arange(t_long) // clip_len, t_short - 1)


def fuse(appearance, motion, clip_len: int | None = None) -> Tensor:
    """Concatenate appearance then motion along channels.

    Works on ``[C, T, H, W]`` or ``[N, C, T, H, W]``. The stream with fewer
    time steps is stretched by index repetition (see ``temporal_index``);
    passing ``clip_len`` aligns each motion step with the frames of its clip.
    """
    a, m = as_tensor(appearance), as_tensor(motion)
    if a.ndim != m.ndim or a.ndim not in (4, 5):
        raise DimensionError("rank", "4 or 5 (matching)", (a.ndim, m.ndim), "fuse")
    if a.shape[-2:] != m.shape[-2:]:
        raise DimensionError("height/width", a.shape[-2:], m.shape[-2:], "fuse")
    if a.ndim == 5 and a.shape[0] != m.shape[0]:
        raise DimensionError("batch", a.shape[0], m.shape[0], "fuse")
    ta, tm = a.shape[-3], m.shape[-3]
    if tm < ta:
        m = take(m, temporal_index(ta, tm, clip_len), axis=-3)
    elif ta < tm:
        a = take(a, temporal_index(tm, ta), axis=-3)
    return concat([a, m], axis=-4)
