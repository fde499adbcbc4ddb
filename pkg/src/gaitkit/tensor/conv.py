"""2-D/3-D convolution and spatial max pooling.

All convolutions reduce to one correlation kernel over ``[N, C, T, H, W]``:
the input is unfolded along width only (channels-last), and every
(time, height) tap is a batched matrix product over a shifted row range. conv2d is the ``T = 1`` case. The input
gradient is the same correlation with a flipped, channel-transposed kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from .core import Tensor, _make, as_tensor

PADDING_MODES = ("same", "valid")


@dataclass
class ConvKernel:
    """Convolution weights ``[O, C, (kt,) kh, kw]`` and an optional bias ``[O]``."""

    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.ndim not in (4, 5):
            raise DimensionError("rank", "4 or 5", self.weight.ndim, "ConvKernel")
        for ax, k in zip(("kernel-time", "kernel-height", "kernel-width")[-(self.weight.ndim - 2):],
                         self.weight.shape[2:]):
            if k % 2 == 0:
                raise DimensionError(ax, "odd extent", k, "ConvKernel")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DimensionError("bias", (self.weight.shape[0],), self.bias.shape, "ConvKernel")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class _Unfolded:
    """Width-unfolded, channels-last, zero-padded input.

    ``cols`` is ``[N, Tp*Hp*Wo, kw*C]``. A (time, height) tap pair is then a
    contiguous row offset, so the output is computed over the padded height
    ``Hp`` and rows ``h >= Ho`` are discarded afterwards.
    """

    cols: np.ndarray
    tp: int
    hp: int
    wo: int


def _unfold(x: np.ndarray, pads: tuple[int, int, int], kw: int) -> _Unfolded:
    n, c, t, h, wd = x.shape
    pt, ph, pw = pads
    tp, hp, wp = t + 2 * pt, h + 2 * ph, wd + 2 * pw
    wo = wp - kw + 1
    xl = np.zeros((n, tp, hp, wp, c))
    xl[:, pt:pt + t, ph:ph + h, pw:pw + wd] = x.transpose(0, 2, 3, 4, 1)
    cols = np.empty((n, tp, hp, wo, kw, c))
    for dx in range(kw):
        cols[:, :, :, :, dx] = xl[:, :, :, dx:dx + wo]
    return _Unfolded(cols.reshape(n, tp * hp * wo, kw * c), tp, hp, wo)


def _tap_rows(u: _Unfolded, kt: int, kh: int) -> tuple[int, int]:
    to = u.tp - kt + 1
    return to, to * u.hp * u.wo - (kh - 1) * u.wo


def _correlate(u: _Unfolded, w: np.ndarray) -> np.ndarray:
    o, c, kt, kh, kw = w.shape
    n = u.cols.shape[0]
    to, rows = _tap_rows(u, kt, kh)
    ho = u.hp - kh + 1
    wk = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(kt, kh, kw * c, o)
    out = np.zeros((n, to * u.hp * u.wo, o))
    acc = out[:, :rows]
    for dt in range(kt):
        for dy in range(kh):
            off = (dt * u.hp + dy) * u.wo
            acc += np.matmul(u.cols[:, off:off + rows], wk[dt, dy])
    out = out.reshape(n, to, u.hp, u.wo, o)[:, :, :ho]
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _weight_grad(u: _Unfolded, g: np.ndarray, kshape) -> np.ndarray:
    o, c, kt, kh, kw = kshape
    n = g.shape[0]
    to, rows = _tap_rows(u, kt, kh)
    ho = g.shape[3]
    gl = np.zeros((n, to, u.hp, u.wo, o))
    gl[:, :, :ho] = g.transpose(0, 2, 3, 4, 1)
    gl = gl.reshape(n, -1, o)[:, :rows]
    gw = np.empty((kt, kh, kw * c, o))
    for dt in range(kt):
        for dy in range(kh):
            off = (dt * u.hp + dy) * u.wo
            gw[dt, dy] = np.matmul(u.cols[:, off:off + rows].transpose(0, 2, 1), gl).sum(axis=0)
    return gw.reshape(kt, kh, kw, c, o).transpose(4, 3, 0, 1, 2)


def _pads(kernel_shape, padding: str) -> tuple[int, ...]:
    if padding == "same":
        return tuple(k // 2 for k in kernel_shape)
    if padding == "valid":
        return tuple(0 for _ in kernel_shape)
    raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")


def _conv(x: Tensor, kernel: ConvKernel, padding: str, rank: int, name: str) -> Tensor:
    w = kernel.weight
    if x.ndim != rank + 2:
        raise DimensionError("rank", rank + 2, x.ndim, name)
    if w.ndim != rank + 2:
        raise DimensionError("kernel rank", rank + 2, w.ndim, name)
    if x.shape[1] != w.shape[1]:
        raise DimensionError("channels", w.shape[1], x.shape[1], name)
    pads = _pads(w.shape[2:], padding)
    if rank == 2:
        xd = x.data[:, :, None]
        wd = w.data[:, :, None]
        pads3 = (0,) + pads
    else:
        xd, wd, pads3 = x.data, w.data, pads
    for ax, size, k, p in zip(("time", "height", "width")[-rank:], x.shape[2:], w.shape[2:], pads):
        if size + 2 * p - k + 1 <= 0:
            raise DimensionError(ax, f">= {k - 2 * p}", size, name)
    unfolded = _unfold(xd, pads3, wd.shape[-1])
    out = _correlate(unfolded, wd)
    if kernel.bias is not None:
        out = out + kernel.bias.data.reshape((1, -1) + (1,) * 3)
    if rank == 2:
        out = out[:, :, 0]
    bias = kernel.bias

    def backward(g):
        g3 = g[:, :, None] if rank == 2 else g
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            back_pads = tuple(k - 1 - p for k, p in zip(wd.shape[2:], pads3))
            gx = _correlate(_unfold(g3, back_pads, wd.shape[-1]), flipped)
            if rank == 2:
                gx = gx[:, :, 0]
        if w.requires_grad:
            gw = _weight_grad(unfolded, g3, wd.shape)
            if rank == 2:
                gw = gw[:, :, 0]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward)


def conv2d(x, kernel: ConvKernel, padding: str = "same") -> Tensor:
    """Correlate ``[N, C, H, W]`` with a ``[O, C, kh, kw]`` kernel (stride 1)."""
    return _conv(as_tensor(x), kernel, padding, 2, "conv2d")


def conv3d(x, kernel: ConvKernel, padding: str = "same") -> Tensor:
    """Correlate ``[N, C, T, H, W]`` with a ``[O, C, kt, kh, kw]`` kernel (stride 1)."""
    return _conv(as_tensor(x), kernel, padding, 3, "conv3d")


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling over the last two axes.

    Trailing rows/columns that do not fill a window are dropped. Ties send the
    gradient to the first element of the window in row-major order.
    """
    x = as_tensor(x)
    *lead, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError("height/width", f">= {size}", (h, w), "max_pool2d")
    crop = x.data[..., : ho * size, : wo * size]
    blocks = crop.reshape(*lead, ho, size, wo, size)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(*lead, ho, wo, size * size)
    pick = np.argmax(flat, axis=-1)[..., None]
    out = np.take_along_axis(flat, pick, axis=-1)[..., 0]
    inverse = np.argsort(perm)

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, pick, g[..., None], axis=-1)
        gb = gf.reshape(*lead, ho, wo, size, size).transpose(inverse).reshape(*lead, ho * size, wo * size)
        gx = np.zeros_like(x.data)
        gx[..., : ho * size, : wo * size] = gb
        return (gx,)

    return _make(out, (x,), backward)
