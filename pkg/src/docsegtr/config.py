"""Run configuration stored as flat ``key = value`` text.

One setting per line; blank lines and ``#`` comments are ignored. Keys:

model
    ``height``, ``width`` (input size, multiples of 64), ``n``, ``K``,
    ``c_stem``, ``c_fpn``, ``c_mask``, ``theta``, ``q_c``, ``num_heads``,
    ``mlp_ratio``, ``use_transformer``, ``use_attention``
optimiser
    ``lr``, ``momentum``, ``weight_decay``, ``grad_clip`` (0 disables),
    ``batch_size``, ``seed``
schedule
    ``warmup_iters``, ``milestones`` (comma separated iteration numbers, or
    empty to place them at 70% and 85% of the run)
inference
    ``score_thr``, ``mask_thr``, ``nms_sigma``, ``nms_method``
    (``gaussian`` or ``linear``), ``top_k``

Unknown keys and malformed values raise :class:`ConfigError`; every loaded
file is validated through the same constructors the library uses.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .maskgen import InferenceConfig
from .model import ModelConfig

AUTO_MILESTONES = (0.70, 0.85)


@dataclass(frozen=True)
class RunConfig:
    height: int = 128
    width: int = 128
    n: int = 8
    K: int = 2
    c_stem: int = 16
    c_fpn: int = 32
    c_mask: int = 16
    theta: int = 1
    q_c: int = 5
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_transformer: bool = True
    use_attention: bool = True
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    batch_size: int = 8
    seed: int = 0
    warmup_iters: int = 100
    milestones: tuple[int, ...] = ()
    score_thr: float = 0.1
    mask_thr: float = 0.5
    nms_sigma: float = 2.0
    nms_method: str = "gaussian"
    top_k: int = 100

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("need lr > 0, 0 <= momentum < 1, weight_decay >= 0")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.batch_size < 1 or self.warmup_iters < 0:
            raise ConfigError("need batch_size >= 1 and warmup_iters >= 0")
        if any(m < 0 for m in self.milestones) or list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be non-negative and increasing: {self.milestones}")
        if not 0 <= self.score_thr < 1 or not 0 < self.mask_thr < 1:
            raise ConfigError("thresholds must lie in [0, 1)")
        if self.nms_method not in ("gaussian", "linear"):
            raise ConfigError(f"unknown nms_method {self.nms_method!r}")
        if self.nms_sigma <= 0 or self.top_k < 1:
            raise ConfigError("need nms_sigma > 0 and top_k >= 1")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=(self.height, self.width), n=self.n, K=self.K, c_stem=self.c_stem,
            c_fpn=self.c_fpn, c_mask=self.c_mask, theta=self.theta, q_c=self.q_c,
            num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
            use_transformer=self.use_transformer, use_attention=self.use_attention)

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(self.score_thr, self.mask_thr, self.nms_sigma, self.nms_method, self.top_k)

    def milestones_for(self, iters: int) -> tuple[int, ...]:
        if self.milestones:
            return self.milestones
        return tuple(int(f * iters) for f in AUTO_MILESTONES)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(str(m) for m in v)
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {s}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _parse(types[key], val)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        try:
            return cls(**values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        return cls.from_text(text, str(p))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse(type_name: str, val: str):
    if type_name == "bool":
        low = val.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {val!r}")
        return low in ("true", "1", "yes")
    if type_name == "int":
        return int(val)
    if type_name == "float":
        return float(val)
    if type_name == "str":
        return val
    # milestones
    return tuple(int(v) for v in val.split(",") if v.strip())
