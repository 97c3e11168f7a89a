"""Training, prediction export and evaluation on a list of samples."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import checkpoint
from .config import RunConfig
from .errors import NumericError
from .evalkit import EvalReport, ImageRecord, InstanceRecord, coco_map
from .maskgen import InstanceSet
from .model import DocSegTr
from .synthdoc import LayoutSample
from .tensor import Tensor, backward
from .training import GridTargets, OptimizerState, assign_targets, sgd_step, total_loss

log = logging.getLogger(__name__)

LOG_HEADER = "iter,total_loss,focal,dice,lr"


@dataclass
class StepRecord:
    iter: int
    total: float
    focal: float
    dice: float
    lr: float

    def csv(self) -> str:
        return f"{self.iter},{self.total!r},{self.focal!r},{self.dice!r},{self.lr!r}"


@dataclass
class TrainResult:
    model: DocSegTr
    opt: OptimizerState
    history: list[StepRecord] = field(default_factory=list)
    seconds: float = 0.0


def make_optimizer(cfg: RunConfig, iters: int) -> OptimizerState:
    return OptimizerState(lr_base=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                          warmup_iters=cfg.warmup_iters, milestones=cfg.milestones_for(iters))


def batch_indices(cfg: RunConfig, num_samples: int, it: int) -> np.ndarray:
    """Indices of the mini-batch used at iteration ``it``.

    Each pass over the data is a fresh permutation seeded by (seed, epoch), so
    the batch depends only on the iteration number and a resumed run sees the
    same data as an uninterrupted one.
    """
    bs = min(cfg.batch_size, num_samples)
    if bs == num_samples:
        return np.arange(num_samples)
    per_epoch = num_samples // bs
    epoch, k = divmod(it, per_epoch)
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(num_samples)
    return np.sort(perm[k * bs:(k + 1) * bs])


def snap_f32(arr: np.ndarray) -> np.ndarray:
    # Checkpoints hold float32; keeping live state on the float32 lattice makes
    # a resumed run continue bit for bit.
    return arr.astype(np.float32).astype(np.float64)


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad = p.grad * scale
    return norm


def train(samples: Sequence[LayoutSample], cfg: RunConfig, iters: int,
          log_file: Optional[TextIO] = None, resume: Optional[dict] = None,
          on_step: Optional[Callable[[StepRecord], None]] = None) -> TrainResult:
    """Run SGD until the optimiser has taken ``iters`` steps in total.

    ``resume`` is a checkpoint entry mapping; training then continues from the
    stored iteration. Raises :class:`NumericError` naming the iteration if the
    loss stops being finite.
    """
    mcfg = cfg.model_config()
    model = DocSegTr(mcfg, seed=cfg.seed)
    opt = make_optimizer(cfg, iters)
    params = model.state_dict()
    if resume is not None:
        checkpoint.restore(model, resume, opt)
    else:
        for p in params.values():
            p.data = snap_f32(p.data)
    h_m, w_m = mcfg.mask_size
    images = np.stack([s.image for s in samples])
    if images.shape[-2:] != tuple(mcfg.input_size):
        raise ValueError(f"images are {images.shape[-2:]}, config expects {mcfg.input_size}")
    targets: list[GridTargets] = [assign_targets(s.instances, mcfg.n, h_m, w_m, mcfg.q_c) for s in samples]
    result = TrainResult(model, opt)
    t0 = time.perf_counter()
    while opt.iter < iters:
        it = opt.iter
        idx = batch_indices(cfg, len(samples), it)
        try:
            out = model(Tensor(images[idx]))
            loss = total_loss(out.cate, out.mask_logits(model.spec), [targets[i] for i in idx])
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from None
        value = loss.total.item()
        if not math.isfinite(value):
            raise NumericError(f"iteration {it}: loss is {value}")
        model.zero_grad()
        backward(loss.total)
        clip_gradients(params, cfg.grad_clip)
        lr = sgd_step(params, opt)
        for name, p in params.items():
            p.data = snap_f32(p.data)
            opt.velocity[name] = snap_f32(opt.velocity[name])
        rec = StepRecord(it, value, loss.focal, loss.dice, lr)
        result.history.append(rec)
        if log_file is not None:
            log_file.write(rec.csv() + "\n")
            log_file.flush()
        if on_step is not None:
            on_step(rec)
        if it % 100 == 0:
            log.info("iter %d loss %.4f (focal %.4f dice %.4f) lr %.5f", it, value, loss.focal, loss.dice, lr)
    result.seconds = time.perf_counter() - t0
    return result


def upsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    if out_h % h or out_w % w:
        raise ValueError(f"cannot upsample {h}x{w} to {out_h}x{out_w} by an integer factor")
    return np.repeat(np.repeat(mask, out_h // h, axis=0), out_w // w, axis=1)


def to_record(image_id: int, inst: InstanceSet, height: int, width: int, mask_thr: float) -> ImageRecord:
    """Prediction record at image resolution (nearest upsampling of the soft-mask threshold)."""
    items = [InstanceRecord(it.class_id, upsample_mask(it.binary(mask_thr), height, width), float(it.score))
             for it in inst.items]
    return ImageRecord(image_id, width, height, items)


def predict(model: DocSegTr, images: np.ndarray, cfg: RunConfig, batch: int = 8) -> list[InstanceSet]:
    inf = cfg.inference_config()
    out: list[InstanceSet] = []
    for k in range(0, len(images), batch):
        out.extend(model.predict(images[k:k + batch], inf))
    return out


def predict_records(model: DocSegTr, images: np.ndarray, image_ids: Sequence[int], cfg: RunConfig) -> list[ImageRecord]:
    _, _, h, w = images.shape
    sets = predict(model, images, cfg)
    return [to_record(i, s, h, w, cfg.mask_thr) for i, s in zip(image_ids, sets)]


def gt_records(samples: Sequence[LayoutSample]) -> list[ImageRecord]:
    return [ImageRecord(k, s.image.shape[2], s.image.shape[1], [InstanceRecord(g.class_id, g.mask) for g in s.instances])
            for k, s in enumerate(samples)]


def evaluate(model: DocSegTr, samples: Sequence[LayoutSample], cfg: RunConfig) -> EvalReport:
    images = np.stack([s.image for s in samples])
    preds = predict_records(model, images, range(len(samples)), cfg)
    return coco_map(preds, gt_records(samples))
