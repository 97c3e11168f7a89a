"""Category and dynamic-kernel heads applied per grid cell."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor

DEFAULT_CLASSES = ("text", "title", "list", "table", "figure")


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if len(self.names) < 1 or len(set(self.names)) != len(self.names):
            raise ConfigError("class names must be non-empty and unique")

    @property
    def q_c(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class KernelSpec:
    theta: int = 1
    c_mask: int = 16
    b: int = field(init=False)

    def __post_init__(self):
        if self.theta < 1 or self.theta % 2 == 0:
            raise ConfigError(f"kernel side theta={self.theta} must be odd and positive")
        if self.c_mask < 1:
            raise ConfigError("c_mask must be >= 1")
        object.__setattr__(self, "b", self.theta * self.theta * self.c_mask)


@dataclass
class GridPredictions:
    cate: Tensor     # [..., n, n, q_c], sigmoid probabilities
    kernels: Tensor  # [..., n, n, b]


class CategoryHead(Module):
    """Two-layer per-cell MLP with gelu between and sigmoid on top."""

    def __init__(self, rng: np.random.Generator, c: int, q_c: int, hidden: int | None = None,
                 prior_prob: float = 0.01):
        hidden = hidden or c
        self.fc1 = Linear(rng, c, hidden)
        self.fc2 = Linear(rng, hidden, q_c)
        # focal-loss prior so early training is not swamped by negatives
        self.fc2.b.data[:] = -np.log((1 - prior_prob) / prior_prob)
        self.q_c = q_c


class KernelHead(Module):
    def __init__(self, rng: np.random.Generator, c: int, spec: KernelSpec):
        self.fc = Linear(rng, c, spec.b)
        self.spec = spec


def category_head_forward(x: Tensor, params: CategoryHead, q_c: int | None = None) -> Tensor:
    q_c = params.q_c if q_c is None else q_c
    if x.shape[-1] != params.fc1.w.shape[0] or params.fc2.w.shape[1] != q_c:
        raise ShapeError(f"category head does not fit input {x.shape} with q_c={q_c}")
    return T.sigmoid(params.fc2(T.gelu(params.fc1(x))))


def kernel_head_forward(x: Tensor, params: KernelHead, spec: KernelSpec | None = None) -> Tensor:
    spec = params.spec if spec is None else spec
    if x.shape[-1] != params.fc.w.shape[0] or params.fc.w.shape[1] != spec.b:
        raise ShapeError(f"kernel head does not fit input {x.shape} with b={spec.b}")
    return params.fc(x)
