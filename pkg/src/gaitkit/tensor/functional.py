"""Composite differentiable ops used by the embedding head and the losses."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .core import Tensor, _make, as_tensor, mean, power, sub, mul, add

GEM_EPS = 1e-6


def gem_pool(x, p, eps: float = GEM_EPS) -> Tensor:
    """Generalized-mean pooling over the last axis.

    ``x`` is ``[..., C, S]``; returns ``[..., C]`` equal to
    ``mean_S(max(x, eps) ** p) ** (1 / p)``. ``p`` may be a learnable scalar
    tensor and receives a gradient.
    """
    x = as_tensor(x)
    p = as_tensor(p)
    if p.size != 1:
        raise DimensionError("p", "scalar", p.shape, "gem_pool")
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError("spatial", "> 0", x.shape, "gem_pool")
    pv = float(p.data.reshape(-1)[0])
    keep = x.data > eps
    z = np.where(keep, x.data, eps)
    zp = np.power(z, pv)
    m = zp.mean(axis=-1)
    y = np.power(m, 1.0 / pv)
    s = x.shape[-1]

    def backward(g):
        gx = gp = None
        if x.requires_grad:
            coef = np.power(m, 1.0 / pv - 1.0)[..., None] * np.power(z, pv - 1.0) / s
            gx = np.where(keep, g[..., None] * coef, 0.0)
        if p.requires_grad:
            mlog = (zp * np.log(z)).mean(axis=-1)
            dy = y * (-np.log(m) / pv**2 + mlog / (pv * m))
            gp = np.full(p.shape, float((g * dy).sum()))
        return gx, gp

    return _make(y, (x, p), backward)


def pairwise_distance(x) -> Tensor:
    """Euclidean distances between rows: ``[..., N, D] -> [..., N, N]``.

    Coincident rows get distance 0 and a zero subgradient.
    """
    x = as_tensor(x)
    diff = x.data[..., :, None, :] - x.data[..., None, :, :]
    sq = (diff * diff).sum(axis=-1)
    d = np.sqrt(sq)

    def backward(g):
        safe = np.where(d > 0, d, 1.0)
        coef = np.where(d > 0, (g + np.swapaxes(g, -1, -2)) / safe, 0.0)
        gx = coef.sum(axis=-1)[..., None] * x.data - np.matmul(coef, x.data)
        return (gx,)

    return _make(d, (x,), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over every leading position.

    ``logits`` is ``[..., K]`` and ``labels`` an integer array matching the
    leading shape.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError("labels", logits.shape[:-1], labels.shape, "softmax_cross_entropy")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = picked.size
    loss = -picked.sum() / count

    def backward(g):
        prob = np.exp(logp)
        np.put_along_axis(prob, labels[..., None], np.take_along_axis(prob, labels[..., None], -1) - 1.0, -1)
        return (prob * (float(g) / count),)

    return _make(np.asarray(loss), (logits,), backward)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature batch normalization of ``[N, F]``.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional); in eval mode the
    running buffers are used and nothing is mutated.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("rank", 2, x.ndim, "batch_norm")
    if training:
        n = x.shape[0]
        if n < 2:
            raise DimensionError("batch", ">= 2", n, "batch_norm (train)")
        mu = mean(x, axis=0, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=0, keepdims=True)
        xhat = mul(centered, power(add(var, eps), -0.5))
        batch_var = var.data[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data[0]
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var * n / (n - 1)
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = mul(sub(x, running_mean[None, :]), scale[None, :])
    return add(mul(xhat, gamma), beta)
