"""Pre-norm transformer encoder with twin attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, ScoreCounter, twin_attention
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 2
    c: int = 32
    mlp_ratio: float = 4
    num_heads: int = 4
    use_attention: bool = True

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.c < 1 or self.c % self.num_heads:
            raise ConfigError(f"c={self.c} must be a positive multiple of num_heads={self.num_heads}")
        hidden = self.mlp_ratio * self.c
        if hidden != int(hidden) or hidden < 1:
            raise ConfigError(f"mlp hidden width {hidden} is not a positive integer")

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.c)


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.c = cfg.c
        self.use_attention = cfg.use_attention
        if cfg.use_attention:
            self.ln1 = LayerNorm(cfg.c)
            self.attn = AttentionParams(rng, cfg.c, cfg.num_heads)
        self.ln2 = LayerNorm(cfg.c)
        self.fc1 = Linear(rng, cfg.c, cfg.hidden)
        self.fc2 = Linear(rng, cfg.hidden, cfg.c)

    def attention_branch(self, x: Tensor, counter: Optional[ScoreCounter] = None) -> Tensor:
        return twin_attention(self.ln1(x), self.attn, counter)

    def mlp_branch(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.ln2(x))))


def encoder_layer_forward(x: Tensor, params: EncoderLayer, counter: Optional[ScoreCounter] = None) -> Tensor:
    """``x1 = x + TwinAttn(LN(x)); out = x1 + MLP(LN(x1))``.

    With ``use_attention`` off the first residual branch is dropped, leaving
    an MLP block after layer norm.
    """
    if x.shape[-1] != params.c:
        raise ShapeError(f"encoder layer expects {params.c} channels, got {x.shape}")
    if params.use_attention:
        x = x + params.attention_branch(x, counter)
    return x + params.mlp_branch(x)


def encoder_stack_forward(x: Tensor, layers: Sequence[EncoderLayer],
                          counter: Optional[ScoreCounter] = None) -> Tensor:
    for layer in layers:
        x = encoder_layer_forward(x, layer, counter)
    return x


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> list[EncoderLayer]:
    return [EncoderLayer(cfg, rng) for _ in range(cfg.K)]
