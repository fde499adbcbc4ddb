"""Parameter containers: just enough structure to name, count and serialize weights."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import ConvKernel, Tensor, batch_norm, conv2d, conv3d


class Module:
    """Walks its attributes (in assignment order) to find parameters and buffers."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, buf in buffers.items():
            buf[...] = state[name]


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def kaiming(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3, 3), rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = _param(kaiming(rng, (out_ch, in_ch, *kernel), fan_in))
        self.bias = _param(np.zeros(out_ch)) if bias else None

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weight, self.bias)

    def __call__(self, x):
        return conv3d(x, self.kernel, "same")


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3), rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = _param(kaiming(rng, (out_ch, in_ch, *kernel), fan_in))
        self.bias = _param(np.zeros(out_ch)) if bias else None

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.weight, self.bias)

    def __call__(self, x):
        return conv2d(x, self.kernel, "same")


class BatchNorm1d(Module):
    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = _param(np.ones(features))
        self.bias = _param(np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self._buffers = ("running_mean", "running_var")
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)
