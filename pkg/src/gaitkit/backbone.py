"""Configurable 3-D convolutional gait backbone with the motion modules plugged in.

Pipeline for a batch ``[N, 1, K, 64, 44]``::

    stage 1:  [FeMo] -> conv3d -> leaky-relu -> concat SiMo motion feature -> 2x2 max-pool
    stage 2:  [FeMo] -> conv3d -> leaky-relu -> 2x2 max-pool
    stage i:  [FeMo] -> conv3d -> leaky-relu
    head:     temporal max -> horizontal strips -> GeM -> per-strip FC -> BN
              -> per-strip classifier (logits)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .femo import FemoBlock
from .nn import BatchNorm1d, Conv3d, Module, kaiming
from .simo import SimoConfig, extract_motion_feature, fuse, motion_input, num_clips
from .tensor import (
    Tensor,
    as_tensor,
    gem_pool,
    leaky_relu,
    matmul,
    max_pool2d,
    reduce,
    reshape,
    transpose,
)


@dataclass
class BackboneConfig:
    """Architecture hyper-parameters.

    ``femo_enabled`` has one flag per stage (a FeMo block before that stage's
    convolution). ``simo=None`` disables the silhouette-level motion branch.
    ``input_pool`` > 1 max-pools the silhouettes before stage 1 and the
    aggregated SiMo motion before its convolution (the masks themselves are
    taken at full resolution); it exists to make desk-scale runs cheap and
    defaults to 1.
    """

    stage_channels: list = field(default_factory=lambda: [32, 128, 256, 256])
    femo_enabled: list = field(default_factory=lambda: [False, True, True, True])
    simo: SimoConfig | None = field(default_factory=SimoConfig)
    num_parts: int = 16
    embedding_dim: int = 64
    num_classes: int = 74
    temporal_kernel: int = 3
    pool_after: list = field(default_factory=lambda: [0, 1])
    input_pool: int = 1
    leaky_slope: float = 0.01
    gem_p: float = 6.5
    gem_eps: float = 1e-6
    femo_shared_kernel: bool = True
    input_height: int = 64
    input_width: int = 44

    def __post_init__(self):
        if isinstance(self.simo, dict):
            self.simo = SimoConfig(**self.simo)
        self.validate()

    def validate(self) -> None:
        if not self.stage_channels:
            raise ConfigError("stage_channels must be non-empty")
        if any(int(c) < 1 for c in self.stage_channels):
            raise ConfigError("stage channel counts must be positive")
        if len(self.femo_enabled) != len(self.stage_channels):
            raise ConfigError("femo_enabled needs one flag per stage")
        if self.temporal_kernel % 2 == 0 or self.temporal_kernel < 1:
            raise ConfigError("temporal_kernel must be odd")
        if self.num_parts < 1 or self.embedding_dim < 1 or self.num_classes < 1:
            raise ConfigError("num_parts, embedding_dim and num_classes must be positive")
        if any(not 0 <= p < len(self.stage_channels) for p in self.pool_after):
            raise ConfigError("pool_after refers to a missing stage")
        if self.input_pool < 1:
            raise ConfigError("input_pool must be >= 1")
        h, _ = self.final_spatial()
        if h % self.num_parts:
            raise ConfigError(f"num_parts={self.num_parts} does not divide the final feature height {h}")

    def final_spatial(self) -> tuple[int, int]:
        h, w = self.input_height // self.input_pool, self.input_width // self.input_pool
        for _ in self.pool_after:
            h, w = h // 2, w // 2
        return h, w

    def stage_inputs(self) -> list[int]:
        ins = [1]
        for i, c in enumerate(self.stage_channels[:-1]):
            extra = self.simo.motion_channels if (i == 0 and self.simo is not None) else 0
            ins.append(int(c) + extra)
        return ins

    def final_channels(self) -> int:
        extra = self.simo.motion_channels if (self.simo is not None and len(self.stage_channels) == 1) else 0
        return int(self.stage_channels[-1]) + extra

    def min_frames(self) -> int:
        return 2 * self.simo.clip_len if self.simo is not None else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BackboneConfig":
        from dataclasses import fields
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        doc = dict(doc)
        simo = doc.get("simo", SimoConfig())
        if isinstance(simo, dict):
            from dataclasses import fields as f2
            sk = {f.name for f in f2(SimoConfig)}
            bad = set(simo) - sk
            if bad:
                raise ConfigError(f"unknown simo keys: {sorted(bad)}")
            simo = SimoConfig(**simo)
        doc["simo"] = simo
        return cls(**doc)


def analytic_parameter_count(cfg: BackboneConfig) -> int:
    """Closed-form learnable-parameter count for ``cfg``."""
    kt = cfg.temporal_kernel
    total = 0
    for cin, cout, femo in zip(cfg.stage_inputs(), cfg.stage_channels, cfg.femo_enabled):
        if femo:
            diff = cin * cin * 9 + cin
            if not cfg.femo_shared_kernel:
                diff *= 2
            total += diff + cin * cin * kt * 9 + cin
        total += cout * cin * kt * 9 + cout
    if cfg.simo is not None:
        total += cfg.simo.motion_channels * 1 * 3 * 9
    c = cfg.final_channels()
    p, d = cfg.num_parts, cfg.embedding_dim
    total += 1                       # GeM exponent
    total += p * c * d               # per-strip FC
    total += 2 * p * d               # BN affine
    total += p * d * cfg.num_classes  # per-strip classifier
    return total


@dataclass
class GaitEmbedding:
    """Per-part metric vectors ``[N, P, D]`` and classifier logits ``[N, P, classes]``."""

    parts: Tensor
    logits: Tensor

    def flat(self) -> np.ndarray:
        """Concatenated part embeddings ``[N, P*D]`` as a plain array."""
        p = self.parts.data
        return p.reshape(p.shape[0], -1)


def temporal_max_pool(x) -> Tensor:
    """Max over the time axis: ``[C, T, H, W] -> [C, H, W]`` (or batched)."""
    x = as_tensor(x)
    return reduce(x, -3, "max")


def horizontal_parts(x, num_parts: int) -> Tensor:
    """Split ``[C, H, W]`` (or ``[N, C, H, W]``) into ``num_parts`` strips, top to bottom.

    Returns ``[P, C, (H/P)*W]`` (or ``[N, P, C, (H/P)*W]``).
    """
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1, *x.shape))
    n, c, h, w = x.shape
    if h % num_parts:
        raise DimensionError("height", f"multiple of {num_parts}", h, "horizontal_parts")
    strips = reshape(x, (n, c, num_parts, (h // num_parts) * w))
    out = transpose(strips, (0, 2, 1, 3))
    return reshape(out, out.shape[1:]) if single else out


class GaitModel(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 11])
        kt = cfg.temporal_kernel
        ins = cfg.stage_inputs()
        self.femo = [FemoBlock(cin, rng, cfg.femo_shared_kernel, kt) if on else None
                     for cin, on in zip(ins, cfg.femo_enabled)]
        self.convs = [Conv3d(cin, int(cout), (kt, 3, 3), rng=rng) for cin, cout in zip(ins, cfg.stage_channels)]
        self.simo_conv = None
        if cfg.simo is not None:
            self.simo_conv = Conv3d(1, cfg.simo.motion_channels, (3, 3, 3), rng=rng, bias=False)
        c = cfg.final_channels()
        p, d = cfg.num_parts, cfg.embedding_dim
        self.gem_p = Tensor(np.array(cfg.gem_p), requires_grad=True)
        self.fc = Tensor(kaiming(rng, (p, c, d), c, slope=1.0), requires_grad=True)
        self.bn = BatchNorm1d(p * d)
        self.classifier = Tensor(rng.standard_normal((p, d, cfg.num_classes)) * 0.01, requires_grad=True)

    def motion_stream(self, x: Tensor) -> Tensor | None:
        """Aggregated motion sequence ``[N, 1, num_clips, H', W']`` fed to the SiMo convolution."""
        cfg = self.cfg
        if cfg.simo is None:
            return None
        if num_clips(x.shape[2], cfg.simo.clip_len, cfg.simo.tail_policy) < 1:
            raise DimensionError("time", f">= {cfg.simo.clip_len}", x.shape[2], "GaitModel")
        # masks at full resolution: pooling first would erase small limb shifts
        motion = motion_input(x, cfg.simo)
        return max_pool2d(motion, cfg.input_pool) if cfg.input_pool > 1 else motion

    def features(self, x) -> Tensor:
        """Backbone feature volume ``[N, C, T, H', W']`` before temporal pooling."""
        cfg = self.cfg
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[1] != 1:
            raise DimensionError("shape", "[N, 1, K, H, W]", x.shape, "GaitModel")
        if x.shape[-2:] != (cfg.input_height, cfg.input_width):
            raise DimensionError("height/width", (cfg.input_height, cfg.input_width), x.shape[-2:], "GaitModel")
        k = x.shape[2]
        if k < cfg.min_frames():
            raise DimensionError("time", f">= {cfg.min_frames()} frames", k, "GaitModel")
        motion = self.motion_stream(x)
        h = max_pool2d(x, cfg.input_pool) if cfg.input_pool > 1 else x
        slope = cfg.leaky_slope
        for i, conv in enumerate(self.convs):
            if self.femo[i] is not None:
                h = self.femo[i](h)
            h = leaky_relu(conv(h), slope)
            if i == 0 and motion is not None:
                fm = extract_motion_feature(motion, self.simo_conv.kernel, slope)
                h = fuse(h, fm, cfg.simo.clip_len)
            if i in cfg.pool_after:
                h = max_pool2d(h, 2)
        return h

    def head(self, feat: Tensor) -> GaitEmbedding:
        cfg = self.cfg
        pooled = temporal_max_pool(feat)                      # [N, C, H, W]
        strips = horizontal_parts(pooled, cfg.num_parts)      # [N, P, C, S]
        vec = gem_pool(strips, self.gem_p, cfg.gem_eps)       # [N, P, C]
        n = vec.shape[0]
        by_part = transpose(vec, (1, 0, 2))                   # [P, N, C]
        emb = matmul(by_part, self.fc)                        # [P, N, D]
        flat = reshape(transpose(emb, (1, 0, 2)), (n, -1))    # [N, P*D]
        normed = self.bn(flat)
        parts = reshape(normed, (n, cfg.num_parts, cfg.embedding_dim))
        logits = matmul(transpose(parts, (1, 0, 2)), self.classifier)  # [P, N, K]
        return GaitEmbedding(parts=parts, logits=transpose(logits, (1, 0, 2)))

    def __call__(self, x) -> GaitEmbedding:
        return self.head(self.features(x))
