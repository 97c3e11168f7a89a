"""Command-line entry point: ``docsegtr <command> [options]``.

Commands: ``gen-data``, ``train``, ``infer``, ``eval`` and ``bench-attn``.
Exit status is 0 on success, 2 for usage, configuration or input-format
problems and 3 when training hits a non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, pipeline
from .attention import AttentionParams, ScoreCounter, attention_score_count, full_attention, twin_attention
from .config import RunConfig
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .evalkit import ImageRecord, coco_map, read_records, write_records
from .model import DocSegTr
from .ppm import read_ppm, write_ppm
from .synthdoc import ANNOTATION_NAME, CLASS_NAMES, GenConfig, image_path, read_dataset, read_meta, write_dataset
from .tensor import Tensor, no_grad

log = logging.getLogger("docsegtr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# overlay tint per class id, blended at 50%
CLASS_COLORS = (
    (230, 25, 75),    # text
    (60, 180, 75),    # title
    (0, 130, 200),    # list
    (245, 130, 48),   # table
    (145, 30, 180),   # figure
)


class UsageError(Exception):
    pass


def config_path_for(ckpt) -> Path:
    """Run config saved next to a checkpoint (``model.dsgt`` -> ``model.dsgt.config``)."""
    return Path(str(ckpt) + ".config")


def parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def overlay(image: np.ndarray, record: ImageRecord) -> np.ndarray:
    """Tint each predicted mask with its class color, lowest score painted first."""
    out = np.array(image, dtype=np.float64, copy=True)
    for inst in sorted(record.instances, key=lambda i: (i.score or 0.0)):
        color = np.array(CLASS_COLORS[inst.class_id % len(CLASS_COLORS)]) / 255.0
        m = np.asarray(inst.mask, dtype=bool)
        out[:, m] = 0.5 * out[:, m] + 0.5 * color[:, None]
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    h, w = args.size
    cfg = GenConfig(h, w, args.min_inst, args.max_inst, args.seed)
    try:
        write_dataset(cfg, args.num, args.out, force=args.force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {args.num} samples to {args.out}")
    return EXIT_OK


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    samples = read_dataset(args.data)
    h, w = samples[0].image.shape[1:]
    if (h, w) != (cfg.height, cfg.width):
        raise ConfigError(f"dataset images are {h}x{w} but the config says {cfg.height}x{cfg.width}")
    resume = None
    if args.resume:
        resume = checkpoint.load(args.resume)
    log_file = None
    if args.log:
        fresh = resume is None or not Path(args.log).exists()
        log_file = open(args.log, "w" if fresh else "a")
        if fresh:
            log_file.write(pipeline.LOG_HEADER + "\n")
    try:
        result = pipeline.train(samples, cfg, args.iters, log_file=log_file, resume=resume)
    finally:
        if log_file is not None:
            log_file.close()
    checkpoint.save(args.out, checkpoint.collect(result.model, result.opt))
    cfg.save(config_path_for(args.out))
    if result.history:
        first, last = result.history[0], result.history[-1]
        print(f"iterations {first.iter}..{last.iter}: loss {first.total:.4f} -> {last.total:.4f} "
              f"in {result.seconds:.1f}s")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _load_model(ckpt: str, config: Optional[str]) -> tuple[DocSegTr, RunConfig]:
    if config:
        cfg = RunConfig.load(config)
    elif config_path_for(ckpt).exists():
        cfg = RunConfig.load(config_path_for(ckpt))
    else:
        cfg = RunConfig()
    model = DocSegTr(cfg.model_config(), seed=cfg.seed)
    checkpoint.restore(model, checkpoint.load(ckpt))
    return model, cfg


def _image_id(path: Path, override: Optional[int]) -> int:
    if override is not None:
        return override
    digits = re.findall(r"\d+", path.stem)
    return int(digits[-1]) if digits else 0


def cmd_infer(args) -> int:
    model, cfg = _load_model(args.ckpt, args.config)
    if args.image:
        paths = [Path(args.image)]
        ids = [_image_id(paths[0], args.image_id)]
    else:
        _, count = read_meta(args.data)
        paths = [image_path(args.data, i) for i in range(count)]
        ids = list(range(count))
    images = np.stack([read_ppm(p) for p in paths])
    if images.shape[-2:] != (cfg.height, cfg.width):
        raise ConfigError(f"image size {images.shape[-2:]} does not match the model input {cfg.height}x{cfg.width}")
    records = pipeline.predict_records(model, images, ids, cfg)
    write_records(args.out_pred, records)
    if args.out_overlay:
        if args.image:
            write_ppm(args.out_overlay, overlay(images[0], records[0]))
        else:
            out_dir = Path(args.out_overlay)
            out_dir.mkdir(parents=True, exist_ok=True)
            for p, img, rec in zip(paths, images, records):
                write_ppm(out_dir / p.name, overlay(img, rec))
    total = sum(len(r.instances) for r in records)
    print(f"{total} instances in {len(records)} image(s); predictions written to {args.out_pred}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_records(args.pred)
    gt_path = Path(args.gt)
    gts = read_records(gt_path / ANNOTATION_NAME if gt_path.is_dir() else gt_path)
    report = coco_map(preds, gts)
    print(report.table(CLASS_NAMES))
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    h, w, c, heads = args.height, args.width, args.channels, args.heads
    if min(h, w, c, heads) < 1 or c % heads:
        raise UsageError("need positive sizes and channels divisible by heads")
    rng = np.random.default_rng(0)
    params = AttentionParams(rng, c, heads)
    x = Tensor(rng.normal(size=(h, w, c)))
    rows = []
    for mode, fn in (("full", lambda cnt: full_attention(x, params.col, heads, cnt)),
                     ("twin", lambda cnt: twin_attention(x, params, cnt))):
        counter = ScoreCounter()
        with no_grad():
            t0 = time.perf_counter()
            fn(counter)
            elapsed = time.perf_counter() - t0
        rows.append((mode, counter.entries, attention_score_count(h, w, mode), elapsed))
    print(f"grid {h}x{w}, channels {c}, heads {heads}")
    print(f"{'mode':<6}{'counted':>14}{'formula':>14}{'seconds':>12}")
    for mode, counted, formula, elapsed in rows:
        print(f"{mode:<6}{counted:>14}{formula:>14}{elapsed:>12.4f}")
    print(f"ratio full/twin: {rows[0][2] / rows[1][2]:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="docsegtr", description="Document layout instance segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic layout dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--size", type=parse_size, default=(128, 128), help="HxW, multiples of 64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-inst", type=int, default=GenConfig.min_instances)
    g.add_argument("--max-inst", type=int, default=GenConfig.max_instances)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--iters", type=int, required=True, help="total optimiser steps")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV training log")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict instances and render overlays")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--config", help="run config (default: the one saved beside the checkpoint)")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="PPM image")
    src.add_argument("--data", help="dataset directory (predicts every image)")
    i.add_argument("--image-id", type=int)
    i.add_argument("--out-pred", required=True)
    i.add_argument("--out-overlay", help="overlay PPM (a directory with --data)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="dataset directory or annotation file")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-attn", help="count attention score entries, full vs twin")
    b.add_argument("--height", type=int, default=32)
    b.add_argument("--width", type=int, default=32)
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--heads", type=int, default=4)
    b.set_defaults(func=cmd_bench_attn)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
