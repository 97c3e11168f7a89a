"""Twin (column-then-row) multi-head self-attention over a patch grid.

Grids are laid out ``[..., h, w, c]``. Column attention lets the ``h`` cells
of each column attend to one another; row attention does the same for the
``w`` cells of each row. Running one after the other gives every cell a
global receptive field while only materialising ``h*w^2 + w*h^2`` score
entries per head instead of ``(h*w)^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Module, glorot, zeros
from .tensor import Tensor


@dataclass
class ScoreCounter:
    """Accumulates query-key score entries (per head, per grid) across calls."""

    entries: int = 0


class Projections(Module):
    """Q/K/V/O projections for one attention mechanism; weights are [c, c]."""

    def __init__(self, rng: np.random.Generator, c: int):
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", glorot(rng, c, c, (c, c)))
            setattr(self, f"b{name}", zeros((c,)))


class AttentionParams(Module):
    def __init__(self, rng: np.random.Generator, c: int, num_heads: int = 4):
        if num_heads < 1 or c % num_heads:
            raise ConfigError(f"channels {c} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.col = Projections(rng, c)
        self.row = Projections(rng, c)


class PositionalEmbeddings(Module):
    """Learnable row and column embeddings, each [n, c]."""

    def __init__(self, rng: np.random.Generator, n: int, c: int, scale: float = 0.02):
        self.row = T.parameter(rng.normal(0.0, scale, size=(n, c)))
        self.col = T.parameter(rng.normal(0.0, scale, size=(n, c)))


def add_positional(x: Tensor, pe: PositionalEmbeddings) -> Tensor:
    """``out[i, j] = x[i, j] + row[i] + col[j]``."""
    h, w, c = x.shape[-3:]
    if pe.row.shape != (h, c) or pe.col.shape != (w, c):
        raise ShapeError(f"positional embeddings {pe.row.shape}/{pe.col.shape} do not fit grid {x.shape[-3:]}")
    grid = T.reshape(pe.row, (h, 1, c)) + T.reshape(pe.col, (1, w, c))
    return x + grid


def _split_heads(x: Tensor, heads: int) -> Tensor:
    c = x.shape[-1]
    return T.reshape(x, x.shape[:-1] + (heads, c // heads))


def _attend(q: Tensor, k: Tensor, v: Tensor):
    """Scaled dot-product over the second-to-last axis of [..., L, d] operands."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    weights = T.softmax_lastdim(T.matmul(q, T.swap_last(k)) * scale)
    return T.matmul(weights, v), weights


def _axis_attention(x: Tensor, proj: Projections, num_heads: int, along: str,
                    counter: Optional[ScoreCounter]):
    if x.ndim < 3:
        raise ShapeError(f"grid must be [..., h, w, c], got {x.shape}")
    h, w, c = x.shape[-3:]
    if c % num_heads:
        raise ConfigError(f"channels {c} not divisible by num_heads {num_heads}")
    nl = x.ndim - 3
    lead = tuple(range(nl))
    i_ax, j_ax, hd_ax, d_ax = nl, nl + 1, nl + 2, nl + 3
    # [..., h, w, H, d] -> sequence axis second to last
    if along == "col":
        perm = lead + (j_ax, hd_ax, i_ax, d_ax)
        seq, groups = h, w
    else:
        perm = lead + (i_ax, hd_ax, j_ax, d_ax)
        seq, groups = w, h
    inv = tuple(np.argsort(perm))
    q, k, v = (T.permute(_split_heads(T.linear(x, getattr(proj, f"w{n}"), getattr(proj, f"b{n}")), num_heads), perm)
               for n in "qkv")
    out, weights = _attend(q, k, v)
    if counter is not None:
        counter.entries += groups * seq * seq
    out = T.reshape(T.permute(out, inv), x.shape)
    return T.linear(out, proj.wo, proj.bo), weights


def column_attention(x: Tensor, p: AttentionParams, counter: Optional[ScoreCounter] = None,
                     return_weights: bool = False):
    """Self-attention within each column of the grid independently.

    Weights come back as [..., w, heads, h, h] when ``return_weights``.
    """
    out, weights = _axis_attention(x, p.col, p.num_heads, "col", counter)
    return (out, weights) if return_weights else out


def row_attention(x: Tensor, p: AttentionParams, counter: Optional[ScoreCounter] = None,
                  return_weights: bool = False):
    """Self-attention within each row; weights are [..., h, heads, w, w]."""
    out, weights = _axis_attention(x, p.row, p.num_heads, "row", counter)
    return (out, weights) if return_weights else out


def twin_attention(x: Tensor, p: AttentionParams, counter: Optional[ScoreCounter] = None) -> Tensor:
    return row_attention(column_attention(x, p, counter), p, counter)


def full_attention(x: Tensor, proj: Projections, num_heads: int,
                   counter: Optional[ScoreCounter] = None) -> Tensor:
    """Standard multi-head self-attention over all h*w cells (the quadratic baseline)."""
    h, w, c = x.shape[-3:]
    if c % num_heads:
        raise ConfigError(f"channels {c} not divisible by num_heads {num_heads}")
    lead = x.shape[:-3]
    nl = len(lead)
    tokens = T.reshape(x, lead + (h * w, c))
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    q, k, v = (T.permute(_split_heads(T.linear(tokens, getattr(proj, f"w{n}"), getattr(proj, f"b{n}")), num_heads), perm)
               for n in "qkv")
    out, _ = _attend(q, k, v)
    if counter is not None:
        counter.entries += (h * w) ** 2
    out = T.reshape(T.permute(out, perm), x.shape)
    return T.linear(out, proj.wo, proj.bo)


def attention_score_count(h: int, w: int, mode: Literal["full", "twin"]) -> int:
    """Query-key score entries per head: ``(h*w)^2`` or ``h*w^2 + w*h^2``."""
    if h < 1 or w < 1:
        raise ValueError("grid dimensions must be >= 1")
    if mode == "full":
        return (h * w) ** 2
    if mode == "twin":
        return h * w * w + w * h * h
    raise ValueError(f"unknown attention mode {mode!r}")
