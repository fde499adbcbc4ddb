"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function that computes its forward value with numpy and,
when any input requires a gradient, records a closure mapping the output
gradient to one gradient per input. ``Tensor.backward`` walks the recorded
graph in reverse topological order and frees it afterwards.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from ..errors import DimensionError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array with optional gradient tracking.

    Leaves are created by the user; ``requires_grad=True`` marks them as
    parameters whose ``grad`` is filled in by ``backward``. Non-leaf tensors
    hold a reference to their inputs until the graph is consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_is_leaf", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = ()
        t._backward = None
        t._is_leaf = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``self`` must hold exactly one element.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node._is_leaf:
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce(self, axis, "min", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
        out._is_leaf = False
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def power(x, exponent: float) -> Tensor:
    """Raise to a constant real power."""
    x = as_tensor(x)
    e = float(exponent)
    out = np.power(x.data, e)

    def backward(g):
        return (g * e * np.power(x.data, e - 1.0),)

    return _make(out, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, negative_slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, negative_slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, negative_slope * g),))


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); the gradient passes only where x > floor."""
    x = as_tensor(x)
    keep = x.data > floor
    out = np.where(keep, x.data, floor)
    return _make(out, (x,), lambda g: (np.where(keep, g, 0.0),))


def relu(x) -> Tensor:
    return clamp_min(x, 0.0)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("rank", ">= 2", (a.ndim, b.ndim), "matmul")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("inner", a.shape[-1], b.shape[-2], "matmul")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# shape manipulation

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def moveaxis(x, source: int, destination: int) -> Tensor:
    x = as_tensor(x)
    perm = list(range(x.ndim))
    src = source % x.ndim
    dst = destination % x.ndim
    perm.remove(src)
    perm.insert(dst, src)
    return transpose(x, perm)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, ts, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward)


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        gs = np.moveaxis(g, axis, 0)
        for j, i in enumerate(idx.reshape(-1)):
            gm[i] += gs[j]
        return (gx,)

    return _make(out, (x,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), backward)


# reductions

_REDUCE_MODES = ("max", "min", "mean", "sum")


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    axes = tuple(sorted({int(a) % ndim for a in axis})) if ndim else ()
    return axes


def reduce(x, axis=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    """Reduce over a set of axes with ``max``, ``min``, ``mean`` or ``sum``.

    ``axis=None`` reduces every axis and an empty axis set is the identity.
    Max and min send the whole gradient to the first attaining element in
    row-major order of the reduced axes.
    """
    x = as_tensor(x)
    if mode not in _REDUCE_MODES:
        raise ValueError(f"unknown reduce mode {mode!r}")
    if axis is not None and not isinstance(axis, (int, np.integer)) and len(axis) == 0:
        return x
    axes = _normalize_axes(axis, x.ndim)
    for a in axes:
        if x.shape[a] == 0:
            raise DimensionError(f"axis {a}", "> 0", 0, f"reduce[{mode}]")
    if not axes:
        return x
    in_shape = x.shape
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    if mode in ("sum", "mean"):
        count = int(np.prod([in_shape[a] for a in axes]))
        out = x.data.sum(axis=axes, keepdims=keepdims)
        if mode == "mean":
            out = out / count
        scale = 1.0 if mode == "sum" else 1.0 / count

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape) * scale, in_shape).copy(),)

        return _make(out, (x,), backward)

    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    xt = np.transpose(x.data, perm)
    rest = xt.shape[: len(keep)]
    flat = xt.reshape(rest + (-1,))
    pick = np.argmax(flat, axis=-1) if mode == "max" else np.argmin(flat, axis=-1)
    pick = pick[..., None]
    out = np.take_along_axis(flat, pick, axis=-1)[..., 0]
    if keepdims:
        out = out.reshape(kept_shape)
    inverse = np.argsort(perm)

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, pick, g.reshape(rest + (1,)), axis=-1)
        return (np.transpose(gf.reshape(xt.shape), inverse),)

    return _make(out, (x,), backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, axis, "sum", keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return reduce(x, axis, "mean", keepdims)
