"""Minimal float64 tensor engine with reverse-mode autodiff."""

from .core import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    exp,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    mean,
    moveaxis,
    mul,
    no_grad,
    power,
    reduce,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    take,
    transpose,
    unbroadcast,
)
from .core import sum as tsum
from .conv import ConvKernel, conv2d, conv3d, max_pool2d
from .functional import batch_norm, gem_pool, pairwise_distance, softmax_cross_entropy

__all__ = [
    "Tensor", "ConvKernel", "add", "as_tensor", "batch_norm", "clamp_min", "concat", "conv2d",
    "conv3d", "exp", "gem_pool", "is_grad_enabled", "leaky_relu", "log", "matmul", "max_pool2d",
    "mean", "moveaxis", "mul", "no_grad", "pairwise_distance", "power", "reduce", "relu",
    "reshape", "sigmoid", "softmax_cross_entropy", "sqrt", "stack", "sub", "take", "transpose",
    "tsum", "unbroadcast",
]
