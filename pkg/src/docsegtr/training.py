"""Target assignment, focal and dice losses, and SGD with Nesterov momentum."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LAMBDA_MASK = 3.0
DICE_EPS = 1e-9
PROB_CLAMP = 1e-7


@dataclass
class GridTargets:
    cate_t: np.ndarray                       # [n, n, q_c] one-hot
    pos_cells: list[tuple[int, int, int]]    # (i, j, instance index)
    mask_t: list[np.ndarray]                 # [H_m, W_m] per positive cell

    @property
    def num_pos(self) -> int:
        return len(self.pos_cells)


def downsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Max-pool a binary mask by the integer factor between the two sizes."""
    h, w = mask.shape
    if h % out_h or w % out_w:
        raise ShapeError(f"mask {h}x{w} is not an integer multiple of {out_h}x{out_w}")
    fh, fw = h // out_h, w // out_w
    return mask.reshape(out_h, fh, out_w, fw).max(axis=(1, 3)).astype(np.float64)


def centroid_cell(mask: np.ndarray, n: int) -> tuple[int, int]:
    """Grid cell containing the mask centroid, pixels counted at their centres."""
    h, w = mask.shape
    rr, cc = np.nonzero(mask)
    cy = rr.mean() + 0.5
    cx = cc.mean() + 0.5
    return min(n - 1, int(np.floor(cy / h * n))), min(n - 1, int(np.floor(cx / w * n)))


def assign_targets(gt: Sequence, n: int, h_m: int, w_m: int, q_c: int = 5) -> GridTargets:
    """Make each instance positive at the cell holding its centroid.

    ``gt`` items need ``class_id`` and ``mask`` (binary H x W) attributes or
    keys. A cell claimed twice goes to the larger mask, then the lower class
    id, then the earlier instance.
    """
    owners: dict[tuple[int, int], tuple[int, int, int]] = {}
    for idx, inst in enumerate(gt):
        cls, mask = _field(inst, "class_id"), np.asarray(_field(inst, "mask"), dtype=bool)
        area = int(mask.sum())
        if area == 0:
            log.warning("skipping instance %d with an empty mask", idx)
            continue
        cell = centroid_cell(mask, n)
        key = (-area, cls, idx)
        if cell not in owners or key < owners[cell]:
            owners[cell] = key
    cate_t = np.zeros((n, n, q_c))
    pos_cells, mask_t = [], []
    for (i, j) in sorted(owners):
        _, cls, idx = owners[(i, j)]
        cate_t[i, j, cls] = 1.0
        pos_cells.append((i, j, idx))
        mask_t.append(downsample_mask(np.asarray(_field(gt[idx], "mask"), dtype=bool), h_m, w_m))
    return GridTargets(cate_t, pos_cells, mask_t)


def _field(obj, name):
    return obj[name] if isinstance(obj, Mapping) else getattr(obj, name)


def focal_loss(p: Tensor, cate_t, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
               num_pos=None) -> Tensor:
    """Sigmoid focal loss summed over cells and classes, over max(1, #positives).

    Leading batch axes beyond [n, n, q_c] are normalised per sample and then
    averaged.
    """
    y = np.asarray(cate_t, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"focal loss: predictions {p.shape} vs targets {y.shape}")
    if np.any((p.data < PROB_CLAMP) | (p.data > 1 - PROB_CLAMP)):
        log.debug("focal loss: clamping probabilities to [%g, %g]", PROB_CLAMP, 1 - PROB_CLAMP)
    pc = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = -alpha * (1.0 - pc) ** gamma * T.log(pc)
    neg = -(1.0 - alpha) * pc ** gamma * T.log(1.0 - pc)
    elem = pos * y + neg * (1.0 - y)
    batch_axes = p.ndim - 3
    if num_pos is None:
        num_pos = y.sum(axis=tuple(range(batch_axes, p.ndim)))
    norm = 1.0 / np.maximum(1.0, np.asarray(num_pos, dtype=np.float64))
    if batch_axes <= 0:
        return elem.sum() * float(norm)
    per_sample = elem.sum(axis=tuple(range(batch_axes, p.ndim))) * norm
    return per_sample.mean()


def dice_loss(p: Tensor, q, axis=None, eps: float = DICE_EPS) -> Tensor:
    """``1 - 2 sum(p q) / (sum p^2 + sum q^2 + eps)`` reduced over ``axis`` (default all)."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    p = T.as_tensor(p)
    if p.shape != q.shape:
        raise ShapeError(f"dice loss: shapes {p.shape} vs {q.shape}")
    inter = (p * q).sum(axis=axis)
    denom = (p * p).sum(axis=axis) + (q * q).sum(axis=axis) + eps
    return 1.0 - 2.0 * inter / denom


@dataclass
class LossBreakdown:
    total: Tensor
    focal: float
    dice: float


def total_loss(cate: Tensor, mask_logits: Tensor, targets, lambda_mask: float = LAMBDA_MASK,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> LossBreakdown:
    """Focal classification loss plus weighted mean dice over positive cells.

    ``cate`` is [n, n, q_c] and ``mask_logits`` is [H_m, W_m, n, n] for a
    single :class:`GridTargets`; with a leading batch axis pass a list of
    targets and the per-image losses are averaged.
    """
    batched = isinstance(targets, (list, tuple))
    tlist = list(targets) if batched else [targets]
    if not batched:
        cate = T.reshape(cate, (1,) + cate.shape)
        mask_logits = T.reshape(mask_logits, (1,) + mask_logits.shape)
    b = len(tlist)
    if cate.shape[0] != b or mask_logits.shape[0] != b:
        raise ShapeError(f"batch of {b} targets vs predictions {cate.shape} / {mask_logits.shape}")
    cate_t = np.stack([t.cate_t for t in tlist])
    npos = np.array([t.num_pos for t in tlist], dtype=np.float64)
    focal = focal_loss(cate, cate_t, alpha, gamma, num_pos=npos)
    total = focal
    dice_val = 0.0
    if lambda_mask != 0 and npos.sum() > 0:
        _, hm, wm, n1, n2 = mask_logits.shape
        flat = T.reshape(T.permute(T.reshape(mask_logits, (b, hm * wm, n1 * n2)), (0, 2, 1)), (b * n1 * n2, hm * wm))
        rows, weights, tgts = [], [], []
        for k, t in enumerate(tlist):
            for (i, j, _), m in zip(t.pos_cells, t.mask_t):
                rows.append(k * n1 * n2 + i * n2 + j)
                weights.append(1.0 / (t.num_pos * b))
                tgts.append(m.reshape(-1))
        probs = T.sigmoid(flat[np.array(rows)])
        per_mask = dice_loss(probs, np.stack(tgts), axis=-1)
        dice = (per_mask * np.array(weights)).sum()
        dice_val = dice.item()
        total = focal + lambda_mask * dice
    return LossBreakdown(total, focal.item(), dice_val)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    lr_base: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-5
    warmup_iters: int = 100
    milestones: tuple[int, ...] = ()
    iter: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(it: int, state: OptimizerState) -> float:
    """Linear warmup to ``lr_base``, then a x0.1 drop at each milestone passed."""
    if it < 0:
        raise ContractError("iteration must be >= 0")
    if it < state.warmup_iters:
        return state.lr_base * (it + 1) / state.warmup_iters
    passed = sum(1 for m in state.milestones if it >= m)
    return state.lr_base / 10 ** passed


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> float:
    """One Nesterov SGD update in place; returns the learning rate used."""
    lr = lr_at(state.iter, state)
    mu, wd = state.momentum, state.weight_decay
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        g = p.grad + wd * p.data
        v = mu * state.velocity.get(name, 0.0) + g
        state.velocity[name] = v
        p.data = p.data - lr * (g + mu * v)
    state.iter += 1
    return lr
