"""The assembled DocSegTr network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import PositionalEmbeddings, ScoreCounter, add_positional
from .backbone import Backbone, BackboneConfig, PyramidFeatures, backbone_fpn_forward, pool_to_grid
from .encoder import EncoderConfig, build_encoder, encoder_stack_forward
from .errors import ConfigError
from .heads import CategoryHead, KernelHead, KernelSpec, category_head_forward, kernel_head_forward
from .lfam import LFAM, grid_to_p5, lfam_fuse
from .maskgen import InferenceConfig, InstanceSet, dynamic_conv, predict_instances
from .nn import Module
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (128, 128)
    n: int = 8
    K: int = 2
    c_stem: int = 16
    c_fpn: int = 32
    c_mask: int = 16
    theta: int = 1
    q_c: int = 5
    num_heads: int = 4
    mlp_ratio: float = 4
    use_transformer: bool = True
    use_attention: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("grid side n must be >= 1")
        if self.q_c < 1:
            raise ConfigError("q_c must be >= 1")
        # delegate the remaining checks to the owning modules
        self.backbone_config()
        self.encoder_config()
        self.kernel_spec()

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.c_stem, self.c_fpn, tuple(self.input_size))

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.K, self.c_fpn, self.mlp_ratio, self.num_heads, self.use_attention)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.theta, self.c_mask)

    @property
    def mask_size(self) -> tuple[int, int]:
        return self.input_size[0] // 4, self.input_size[1] // 4


@dataclass
class ModelOutput:
    cate: Tensor          # [..., n, n, q_c]
    kernels: Tensor       # [..., n, n, b]
    mask_feats: Tensor    # [..., H_m, W_m, c_mask]
    pyramid: PyramidFeatures

    def mask_logits(self, spec: KernelSpec) -> Tensor:
        return dynamic_conv(self.mask_feats, self.kernels, spec)


class DocSegTr(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.spec = cfg.kernel_spec()
        self.backbone = Backbone(cfg.backbone_config(), rng)
        if cfg.use_transformer:
            self.pos = PositionalEmbeddings(rng, cfg.n, cfg.c_fpn)
            self.encoder = build_encoder(cfg.encoder_config(), rng)
        self.cate_head = CategoryHead(rng, cfg.c_fpn, cfg.q_c)
        self.kernel_head = KernelHead(rng, cfg.c_fpn, self.spec)
        self.lfam = LFAM(rng, cfg.c_fpn, cfg.c_mask)

    def __call__(self, images: Tensor, counter: Optional[ScoreCounter] = None) -> ModelOutput:
        pyr = backbone_fpn_forward(images, self.backbone)
        p5 = pyr[5]
        grid = pool_to_grid(p5, self.cfg.n)
        if self.cfg.use_transformer:
            grid = encoder_stack_forward(add_positional(grid, self.pos), self.encoder, counter)
        cate = category_head_forward(grid, self.cate_head)
        kernels = kernel_head_forward(grid, self.kernel_head)
        p5t = grid_to_p5(grid, p5.shape[-2:])
        f = lfam_fuse(pyr[2], pyr[3], pyr[4], p5t, self.lfam, self.cfg.mask_size)
        return ModelOutput(cate, kernels, f, pyr)

    def predict(self, images: np.ndarray, cfg: InferenceConfig = InferenceConfig()) -> list[InstanceSet]:
        """Inference on a batch [B, 3, H, W] (or a single [3, H, W] image)."""
        single = images.ndim == 3
        batch = images[None] if single else images
        with no_grad():
            out = self(Tensor(batch))
        results = [predict_instances(out.cate.data[k], out.kernels.data[k], out.mask_feats.data[k], self.spec, cfg)
                   for k in range(batch.shape[0])]
        return results
