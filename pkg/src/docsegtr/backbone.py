"""Stand-in convolutional backbone with a feature pyramid (P2-P6)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv, Module
from .tensor import Tensor

LEVELS = (2, 3, 4, 5, 6)


@dataclass(frozen=True)
class BackboneConfig:
    c_stem: int = 16
    c_fpn: int = 32
    input_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        if self.c_stem < 1 or self.c_fpn < 1:
            raise ConfigError("c_stem and c_fpn must be >= 1")
        h, w = self.input_size
        if h % 64 or w % 64 or h < 64 or w < 64:
            raise ConfigError(f"input size {h}x{w} must be a positive multiple of 64")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        """Channel widths of C2..C5."""
        c = self.c_stem
        return (c, 2 * c, 4 * c, 8 * c)

    def expected_num_parameters(self) -> int:
        c, f = self.c_stem, self.c_fpn
        c2, c3, c4, c5 = self.stage_channels
        stem = 27 * c + c
        stages = (9 * c * c2 + c2) + (9 * c2 * c3 + c3) + (9 * c3 * c4 + c4) + (9 * c4 * c5 + c5)
        lateral = (c2 + c3 + c4 + c5) * f + 4 * f
        smooth = 4 * (9 * f * f + f)
        return stem + stages + lateral + smooth


@dataclass
class PyramidFeatures:
    """FPN outputs keyed by level; each is [..., c_fpn, H/2^l, W/2^l]."""

    levels: dict[int, Tensor]

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        c2, c3, c4, c5 = cfg.stage_channels
        self.stem = Conv(rng, 3, cfg.c_stem, 3, stride=2)
        self.stages = [
            Conv(rng, cfg.c_stem, c2, 3, stride=2),
            Conv(rng, c2, c3, 3, stride=2),
            Conv(rng, c3, c4, 3, stride=2),
            Conv(rng, c4, c5, 3, stride=2),
        ]
        self.lateral = [Conv(rng, c, cfg.c_fpn, 1) for c in (c2, c3, c4, c5)]
        self.smooth = [Conv(rng, cfg.c_fpn, cfg.c_fpn, 3) for _ in range(4)]

    def __call__(self, image: Tensor) -> PyramidFeatures:
        return backbone_fpn_forward(image, self)


def backbone_fpn_forward(image: Tensor, params: Backbone) -> PyramidFeatures:
    """Run the stand-in CNN and FPN on ``image`` of shape [..., 3, H, W]."""
    h, w = image.shape[-2:]
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ShapeError(f"expected [..., 3, H, W] image, got {image.shape}")
    if h % 64 or w % 64:
        raise ShapeError(f"image size {h}x{w} is not divisible by 64")
    x = T.gelu(params.stem(image))
    feats = []
    for stage in params.stages:
        x = T.gelu(stage(x))
        feats.append(x)
    lat = [conv(c) for conv, c in zip(params.lateral, feats)]
    top = lat[3]
    merged = [top]
    for lvl in (2, 1, 0):
        top = lat[lvl] + T.upsample_nearest2d(top, lat[lvl].shape[-2:])
        merged.insert(0, top)
    outs = {lvl + 2: params.smooth[lvl](m) for lvl, m in enumerate(merged)}
    p5 = outs[5]
    outs[6] = T.adaptive_avg_pool2d(p5, (p5.shape[-2] // 2, p5.shape[-1] // 2))
    return PyramidFeatures(outs)


def pool_to_grid(p5: Tensor, n: int) -> Tensor:
    """Adaptive-average-pool [..., c, H5, W5] to an n x n grid laid out [..., n, n, c]."""
    if n < 1:
        raise ShapeError(f"grid side must be >= 1, got {n}")
    g = T.adaptive_avg_pool2d(p5, (n, n))
    nd = g.ndim
    return T.permute(g, tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3))
