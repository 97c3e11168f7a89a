"""Layerwise feature aggregation: fuse P2-P4 with the encoder-processed P5."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Conv, Module
from .tensor import Tensor


class LFAM(Module):
    def __init__(self, rng: np.random.Generator, c_fpn: int, c_mask: int):
        self.c_fpn = c_fpn
        self.pre = [Conv(rng, c_fpn, c_fpn, 3) for _ in range(4)]
        self.fuse = Conv(rng, 4 * c_fpn, c_mask, 1)


def grid_to_p5(grid: Tensor, size: tuple[int, int]) -> Tensor:
    """Lay an encoder grid [..., n, n, c] out as a [..., c, H5, W5] map.

    A grid finer than P5 is average-pooled down (inverting the duplication
    done when P5 was pooled up to the grid); a coarser one is
    nearest-upsampled.
    """
    nd = grid.ndim
    x = T.permute(grid, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))
    n = x.shape[-2]
    if (n, x.shape[-1]) == tuple(size):
        return x
    if n >= size[0]:
        return T.adaptive_avg_pool2d(x, size)
    return T.upsample_nearest2d(x, size)


def lfam_fuse(p2: Tensor, p3: Tensor, p4: Tensor, p5t: Tensor, params: LFAM,
              out_size: tuple[int, int] | None = None) -> Tensor:
    """Return the mask feature map [..., H_m, W_m, c_mask] (H_m, W_m default to P2 size)."""
    levels = (p2, p3, p4, p5t)
    for lv in levels:
        if lv.shape[-3] != params.c_fpn:
            raise ShapeError(f"LFAM expects {params.c_fpn} channels, got level of shape {lv.shape}")
    size = p2.shape[-2:]
    processed = [T.upsample_nearest2d(T.gelu(conv(lv)), size) for conv, lv in zip(params.pre, levels)]
    fused = params.fuse(T.concat(processed, axis=-3))
    if out_size is not None and tuple(out_size) != tuple(size):
        fused = T.upsample_nearest2d(fused, out_size)
    nd = fused.ndim
    return T.permute(fused, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))
