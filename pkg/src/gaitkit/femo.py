"""Feature-level motion enhancement.

Between neighbouring time steps of a feature volume ``G`` we take a fine
difference (a learned 3x3 convolution of one step minus the other step) and a
coarse difference (its global spatial average), in both temporal directions.
The averaged sigmoid of the two directional differences is an attention map
used to recalibrate ``G`` residually before a channel-preserving 3-D
convolution.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .nn import Conv2d, Conv3d, Module
from .tensor import (
    ConvKernel,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    conv3d,
    mean,
    mul,
    reshape,
    sigmoid,
    sub,
    transpose,
)


def fine_difference(g_t, g_next, kernel: ConvKernel) -> Tensor:
    """``conv2d(g_next) - g_t`` with same padding, for ``[C, H, W]`` or ``[N, C, H, W]``."""
    a, b = as_tensor(g_t), as_tensor(g_next)
    if a.shape != b.shape:
        raise DimensionError("shape", a.shape, b.shape, "fine_difference")
    single = a.ndim == 3
    if single:
        b = reshape(b, (1, *b.shape))
    out = conv2d(b, kernel, "same")
    if single:
        out = reshape(out, out.shape[1:])
    return sub(out, a)


def coarse_difference(delta) -> Tensor:
    """Global average over the last two (spatial) axes, kept as size-1 axes."""
    return mean(as_tensor(delta), axis=(-2, -1), keepdims=True)


def _frames_major(g: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    n, c, t, h, w = g.shape
    return reshape(transpose(g, (0, 2, 1, 3, 4)), (n * t, c, h, w)), (n, t, c, h, w)


def _time_major_back(x: Tensor, dims) -> Tensor:
    n, t, c, h, w = dims
    return transpose(reshape(x, (n, t, c, h, w)), (0, 2, 1, 3, 4))


def bidirectional_differences(g, kernel: ConvKernel, backward_kernel: ConvKernel | None = None):
    """Forward and backward difference volumes of ``G``.

    ``g`` is ``[C, T, H, W]`` or ``[N, C, T, H, W]``. Returns ``(D_f, D_b)``
    with ``T - 1`` time steps where::

        D_f[t] = delta(G[t], G[t+1]) + mean_hw(delta(G[t], G[t+1]))
        D_b[t] = delta(G[t+1], G[t]) + mean_hw(delta(G[t+1], G[t]))
        delta(a, b) = conv2d(b) - a

    The same kernel serves both directions unless ``backward_kernel`` is given.
    """
    g = as_tensor(g)
    single = g.ndim == 4
    if single:
        g = reshape(g, (1, *g.shape))
    if g.ndim != 5:
        raise DimensionError("rank", "4 or 5", g.ndim, "bidirectional_differences")
    t = g.shape[2]
    if t < 2:
        raise DimensionError("time", ">= 2", t, "bidirectional_differences")
    frames, dims = _frames_major(g)
    conv_f = _time_major_back(conv2d(frames, kernel, "same"), dims)
    conv_b = conv_f if backward_kernel is None else _time_major_back(conv2d(frames, backward_kernel, "same"), dims)
    fine_f = sub(conv_f[:, :, 1:], g[:, :, :-1])
    fine_b = sub(conv_b[:, :, :-1], g[:, :, 1:])
    d_f = add(fine_f, coarse_difference(fine_f))
    d_b = add(fine_b, coarse_difference(fine_b))
    if single:
        d_f = reshape(d_f, d_f.shape[1:])
        d_b = reshape(d_b, d_b.shape[1:])
    return d_f, d_b


# float64 sigmoid rounds to exactly 1.0 past ~37; W is kept strictly inside (0, 1)
_W_MIN = np.finfo(np.float64).tiny
_W_MAX = np.nextafter(1.0, 0.0)


def motion_attention(d_f, d_b) -> Tensor:
    """``(sigmoid(D_f) + sigmoid(D_b)) / 2``, element-wise in (0, 1).

    Values that round to 0 or 1 are pulled to the nearest representable
    interior value; the gradient passes through unchanged.
    """
    w = mul(add(sigmoid(d_f), sigmoid(d_b)), 0.5)
    np.clip(w.data, _W_MIN, _W_MAX, out=w.data)
    return w


def align_attention(w, t: int) -> Tensor:
    """Extend a ``T-1``-step attention map to ``T`` steps by repeating its last step."""
    w = as_tensor(w)
    if w.shape[-3] != t - 1:
        raise DimensionError("time", t - 1, w.shape[-3], "align_attention")
    return concat([w, w[..., -1:, :, :]], axis=-3)


def recalibrate(g, w, out_conv: ConvKernel) -> Tensor:
    """``conv3d(G + G * W_aligned)`` with same padding.

    ``G`` is ``[C, T, H, W]`` or ``[N, C, T, H, W]`` and ``W`` has ``T - 1`` steps.
    """
    g = as_tensor(g)
    single = g.ndim == 4
    wa = align_attention(w, g.shape[-3])
    x = add(g, mul(g, wa))
    if single:
        x = reshape(x, (1, *x.shape))
    out = conv3d(x, out_conv, "same")
    return reshape(out, out.shape[1:]) if single else out


def identity_kernel_init(channels: int, rng: np.random.Generator, noise_std: float = 0.01) -> np.ndarray:
    """3x3 kernel that is the identity map plus small Gaussian noise on every tap."""
    w = rng.normal(0.0, noise_std, size=(channels, channels, 3, 3))
    w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return w


class FemoBlock(Module):
    """Drop-in motion enhancement for ``[N, C, T, H, W]`` feature volumes."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 shared_kernel: bool = True, temporal_kernel: int = 3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.diff_conv = Conv2d(channels, channels, rng=rng)
        self.diff_conv.weight.data = identity_kernel_init(channels, rng)
        self.diff_conv_backward = None
        if not shared_kernel:
            self.diff_conv_backward = Conv2d(channels, channels, rng=rng)
            self.diff_conv_backward.weight.data = identity_kernel_init(channels, rng)
        self.out_conv = Conv3d(channels, channels, (temporal_kernel, 3, 3), rng=rng)

    def attention(self, g) -> Tensor:
        back = None if self.diff_conv_backward is None else self.diff_conv_backward.kernel
        d_f, d_b = bidirectional_differences(g, self.diff_conv.kernel, back)
        return motion_attention(d_f, d_b)

    def __call__(self, g) -> Tensor:
        g = as_tensor(g)
        if g.shape[-4] != self.channels:
            raise DimensionError("channels", self.channels, g.shape[-4], "FemoBlock")
        return recalibrate(g, self.attention(g), self.out_conv.kernel)
