"""Dynamic-kernel mask generation, Matrix NMS and instance assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .heads import KernelSpec
from .tensor import Tensor


@dataclass
class Instance:
    class_id: int
    score: float
    soft_mask: np.ndarray
    cell: tuple[int, int]

    def binary(self, thr: float = 0.5) -> np.ndarray:
        return self.soft_mask >= thr


@dataclass
class InstanceSet:
    items: list[Instance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def scores(self) -> np.ndarray:
        return np.array([it.score for it in self.items])


@dataclass(frozen=True)
class InferenceConfig:
    score_thr: float = 0.1
    mask_thr: float = 0.5
    nms_sigma: float = 2.0
    nms_method: str = "gaussian"
    top_k: int = 100


def dynamic_conv(f: Tensor, kernels: Tensor, spec: KernelSpec) -> Tensor:
    """Convolve the mask features with every cell's predicted kernel.

    ``f`` is [..., H_m, W_m, c_mask]; ``kernels`` is [..., n, n, b] where each
    length-b vector is a theta x theta x c_mask kernel. Returns mask logits
    [..., H_m, W_m, n, n] (zero padding keeps the spatial size).
    """
    th, c = spec.theta, spec.c_mask
    if kernels.shape[-1] != spec.b or spec.b != th * th * c:
        raise ConfigError(f"kernel length {kernels.shape[-1]} inconsistent with theta={th}, c_mask={c}")
    if f.shape[-1] != c:
        raise ConfigError(f"mask features have {f.shape[-1]} channels, kernels expect {c}")
    hm, wm = f.shape[-3:-1]
    n1, n2 = kernels.shape[-3:-1]
    lead = f.shape[:-3]
    if kernels.shape[:-3] != lead:
        raise ShapeError(f"batch dims differ: features {f.shape}, kernels {kernels.shape}")
    nl = len(lead)
    if th == 1:
        cols = T.reshape(f, lead + (hm * wm, c))
        kmat = T.reshape(kernels, lead + (n1 * n2, c))
    else:
        fc = T.permute(f, tuple(range(nl)) + (nl + 2, nl, nl + 1))
        cols = T.unfold2d(fc, th, th, padding=(th - 1) // 2)  # [..., HW, c*th*th], order (c, dy, dx)
        k = T.reshape(kernels, lead + (n1 * n2, th, th, c))
        k = T.permute(k, tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 2))
        kmat = T.reshape(k, lead + (n1 * n2, c * th * th))
    logits = T.matmul(cols, T.swap_last(kmat))
    return T.reshape(logits, lead + (hm, wm, n1, n2))


def _decay_fn(method: str, sigma: float):
    if method == "gaussian":
        return lambda x: np.exp(-(x * x) / sigma)
    if method == "linear":
        return lambda x: 1.0 - x
    raise ConfigError(f"unknown Matrix NMS method {method!r}")


def mask_iou_matrix(masks: np.ndarray) -> np.ndarray:
    """Pairwise IoU of binary masks [N, ...]; empty unions give 0."""
    flat = masks.reshape(len(masks), -1).astype(np.float64)
    inter = flat @ flat.T
    area = flat.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou


def matrix_nms_scores(masks: np.ndarray, scores: np.ndarray, sigma: float = 2.0,
                      method: Literal["gaussian", "linear"] = "gaussian") -> np.ndarray:
    """Decayed scores for binary ``masks`` already sorted by descending score.

    For item j: ``decay_j = min_{i<j} f(iou_ij) / f(iou_max_i)`` where
    ``iou_max_i`` is i's largest IoU with any higher-scored item.
    """
    if sigma <= 0:
        raise ConfigError(f"Matrix NMS sigma must be positive, got {sigma}")
    f = _decay_fn(method, sigma)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n <= 1:
        return scores.copy()
    iou = np.triu(mask_iou_matrix(masks), k=1)  # iou[i, j] for i < j
    comp = iou.max(axis=0)  # iou_max for each i (column max over higher-scored)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = f(iou) / np.maximum(f(comp), 1e-12)[:, None]
    ratio = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), ratio, np.inf)
    decay = ratio.min(axis=0)
    decay[0] = 1.0
    return scores * decay


def _order_key(it: Instance):
    return (-it.score, it.cell[0], it.cell[1], it.class_id)


def matrix_nms(items: InstanceSet, sigma: float = 2.0, method: str = "gaussian",
               mask_thr: float = 0.5) -> InstanceSet:
    """Decay scores of overlapping instances and re-sort them."""
    ordered = sorted(items.items, key=_order_key)
    if not ordered:
        return InstanceSet([])
    masks = np.stack([it.binary(mask_thr) for it in ordered])
    decayed = matrix_nms_scores(masks, np.array([it.score for it in ordered]), sigma, method)
    out = [Instance(it.class_id, float(s), it.soft_mask, it.cell) for it, s in zip(ordered, decayed)]
    return InstanceSet(sorted(out, key=_order_key))


def predict_instances(cate, kernels, f, spec: KernelSpec, cfg: InferenceConfig = InferenceConfig()) -> InstanceSet:
    """Turn one image's grid predictions into scored instances.

    ``cate`` [n, n, q_c], ``kernels`` [n, n, b], ``f`` [H_m, W_m, c_mask];
    tensors or arrays are accepted. Soft masks stay at mask-feature
    resolution.
    """
    cate = cate.data if isinstance(cate, Tensor) else np.asarray(cate, dtype=np.float64)
    kern = kernels.data if isinstance(kernels, Tensor) else np.asarray(kernels, dtype=np.float64)
    feat = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if cate.ndim != 3 or kern.shape[:2] != cate.shape[:2]:
        raise ShapeError(f"inconsistent grid shapes {cate.shape} / {kern.shape}")
    best = cate.max(axis=-1)
    cls = cate.argmax(axis=-1)
    rows, cols = np.nonzero(best >= cfg.score_thr)
    if len(rows) == 0:
        return InstanceSet([])
    with T.no_grad():
        sel = Tensor(kern[rows, cols][None])  # [1, m, b] as a 1 x m grid
        logits = dynamic_conv(Tensor(feat), sel, spec).data[..., 0, :]  # [H_m, W_m, m]
    soft = 1.0 / (1.0 + np.exp(-logits))
    cands = [Instance(int(cls[r, c]), float(best[r, c]), soft[..., k], (int(r), int(c)))
             for k, (r, c) in enumerate(zip(rows, cols))]
    kept = matrix_nms(InstanceSet(cands), cfg.nms_sigma, cfg.nms_method)
    survivors = [it for it in kept.items if it.score >= cfg.score_thr]
    return InstanceSet(survivors[: cfg.top_k])
