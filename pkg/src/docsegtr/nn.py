"""Parameter containers.

A :class:`Module` is any object whose attributes hold parameter tensors,
other modules, or lists of modules. Parameter names are dotted attribute
paths, e.g. ``encoder.0.attn.col.wq``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, parameter


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=shape))


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


def ones(shape) -> Tensor:
    return parameter(np.ones(shape))


class Linear(Module):
    """Weight [in, out] and bias [out]."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = glorot(rng, n_in, n_out, (n_in, n_out))
        self.b = zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import linear

        return linear(x, self.w, self.b)


class Conv(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int = 1):
        self.w = he_normal(rng, c_in * k * k, (c_out, c_in, k, k))
        self.b = zeros((c_out,))
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import conv2d

        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gamma = ones((c,))
        self.beta = zeros((c,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import layer_norm

        return layer_norm(x, self.gamma, self.beta, self.eps)
