"""Deterministic synthetic page layouts for training and evaluation.

Randomness comes from SplitMix64 (increment 0x9E3779B97F4A7C15, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, shifts 30/27/31) seeded with
``seed XOR index``, so a sample is a pure function of its config and index.

Pages are white. Regions are axis-aligned rectangles aligned to 4 px, with
at least 4 px between any two and from the page edge. Placement is rejection
sampling where half the proposals continue a column (directly under an
existing block, same left edge and width), so headings sit on top of
paragraphs as they do on real pages. A region that still has no spot after
100 proposals drops to its class's minimum size for the remaining 100.
Each class gets its own texture:

========  ==========================================================
text      2 px dark stripes every 4 px
title     one thick dark band
list      indented stripes every 6 px with a 2x2 bullet on the left
table     grey grid lines every 8 px plus a border
figure    mid-grey fill with a black 1 px border
========  ==========================================================
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .evalkit import ImageRecord, InstanceRecord, read_records, write_records
from .ppm import read_ppm, write_ppm

log = logging.getLogger(__name__)

CLASS_NAMES = ("text", "title", "list", "table", "figure")
MASK64 = (1 << 64) - 1
MAX_ATTEMPTS = 200
SHRINK_AFTER = 100
UNIT = 4
META_NAME = "meta.txt"
ANNOTATION_NAME = "annotations.txt"


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] (modulo reduction)."""
        return lo + self.next() % (hi - lo + 1)


@dataclass(frozen=True)
class GenConfig:
    H: int = 128
    W: int = 128
    min_instances: int = 4
    max_instances: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.H % 64 or self.W % 64 or self.H < 64 or self.W < 64:
            raise ConfigError(f"image size {self.H}x{self.W} must be a positive multiple of 64")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")


@dataclass
class GtInstance:
    class_id: int
    mask: np.ndarray


@dataclass
class LayoutSample:
    image: np.ndarray                      # [3, H, W] in [0, 1]
    instances: list[GtInstance] = field(default_factory=list)
    seed: int = 0


def _region_size(rng: SplitMix64, cls: int, H: int, W: int) -> tuple[int, int]:
    # Sizes in 4 px units. Body blocks are at least H/8 tall, so any two
    # disjoint blocks keep their centroids in distinct cells of an 8x8 grid.
    # Titles are thin (H/16 to 3H/32); a title stacked on a body block still
    # lands in its own grid cell, but two stacked titles may not.
    hu_min, wu_min = H // 8 // UNIT, W // 8 // UNIT
    wu = rng.randint(wu_min, W // 2 // UNIT)
    if cls == 1:
        hu = rng.randint(hu_min // 2, 3 * hu_min // 4)
    else:
        hu = rng.randint(hu_min, 3 * H // 8 // UNIT)
    return hu * UNIT, wu * UNIT


def _min_size(cls: int, H: int, W: int) -> tuple[int, int]:
    return (H // 16 if cls == 1 else H // 8) // UNIT * UNIT, W // 8 // UNIT * UNIT


def _propose(rng: SplitMix64, boxes, h: int, w: int, H: int, W: int) -> tuple[int, int, int]:
    # Half of the proposals continue the column of an existing block: directly
    # below it, left-aligned and with the same width, the way paragraphs
    # follow headings on a page. The rest land anywhere inside the margin.
    if boxes and rng.randint(0, 1):
        by, bx, bh, bw = boxes[rng.randint(0, len(boxes) - 1)]
        y0 = by + bh + UNIT
        if y0 + h <= H - UNIT:
            return y0, bx, bw
    return UNIT * rng.randint(1, (H - h) // UNIT - 1), UNIT * rng.randint(1, (W - w) // UNIT - 1), w


def _paint(img: np.ndarray, cls: int, y0: int, x0: int, h: int, w: int) -> None:
    region = img[:, y0:y0 + h, x0:x0 + w]
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    if cls == 0:
        ink = (ys % 4 < 2) & (xs >= 0)
        region[:, ink] = 0.15
    elif cls == 1:
        region[:, 2:h - 2, :] = 0.1
    elif cls == 2:
        line = ys % 6 < 2
        region[:, line & (xs >= 6)] = 0.2
        region[:, line & (xs >= 1) & (xs < 3)] = 0.0
    elif cls == 3:
        grid = (ys % 8 == 0) | (xs % 8 == 0) | (ys == h - 1) | (xs == w - 1)
        region[:, grid] = 0.3
    else:
        region[:] = 0.6
        border = (ys == 0) | (xs == 0) | (ys == h - 1) | (xs == w - 1)
        region[:, border] = 0.0


def generate_sample(cfg: GenConfig, index: int) -> LayoutSample:
    """Sample ``index`` of the dataset described by ``cfg``."""
    seed = (cfg.seed ^ index) & MASK64
    rng = SplitMix64(seed)
    H, W = cfg.H, cfg.W
    img = np.ones((3, H, W))
    k = rng.randint(cfg.min_instances, cfg.max_instances)
    boxes: list[tuple[int, int, int, int]] = []
    instances = []
    for _ in range(k):
        cls = rng.randint(0, len(CLASS_NAMES) - 1)
        h, w = _region_size(rng, cls, H, W)
        for attempt in range(MAX_ATTEMPTS):
            if attempt == SHRINK_AFTER:
                # Big blocks fail to fit far more often than thin titles; without
                # this fallback the placed class mix drifts away from uniform.
                h, w = _min_size(cls, H, W)
            y0, x0, pw = _propose(rng, boxes, h, w, H, W)
            # keep a one-unit gap between regions
            if all(y0 >= by + bh + UNIT or by >= y0 + h + UNIT or x0 >= bx + bw + UNIT or bx >= x0 + pw + UNIT
                   for by, bx, bh, bw in boxes):
                w = pw
                break
        else:
            log.debug("sample %d: could not place a region after %d attempts", index, MAX_ATTEMPTS)
            continue
        boxes.append((y0, x0, h, w))
        _paint(img, cls, y0, x0, h, w)
        mask = np.zeros((H, W), dtype=bool)
        mask[y0:y0 + h, x0:x0 + w] = True
        instances.append(GtInstance(cls, mask))
    return LayoutSample(img, instances, seed)


def _image_name(i: int) -> str:
    return f"{i:06d}.ppm"


def image_path(directory, i: int) -> Path:
    """Path of image ``i`` inside a dataset directory."""
    return Path(directory) / _image_name(i)


def write_dataset(cfg: GenConfig, count: int, directory, force: bool = False) -> list[LayoutSample]:
    """Write ``count`` samples as PPM images plus one annotation file and a meta file."""
    d = Path(directory)
    if d.exists() and any(d.iterdir()):
        if not force:
            raise FileExistsError(f"{d} is not empty (pass force to overwrite)")
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    samples = [generate_sample(cfg, i) for i in range(count)]
    records = []
    for i, s in enumerate(samples):
        write_ppm(d / _image_name(i), s.image)
        records.append(ImageRecord(i, cfg.W, cfg.H, [InstanceRecord(g.class_id, g.mask) for g in s.instances]))
    write_records(d / ANNOTATION_NAME, records)
    meta = {"format": "docsegtr-synth v1", "height": cfg.H, "width": cfg.W,
            "min_instances": cfg.min_instances, "max_instances": cfg.max_instances,
            "seed": cfg.seed, "count": count}
    (d / META_NAME).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return samples


def read_meta(directory) -> tuple[GenConfig, int]:
    path = Path(directory) / META_NAME
    try:
        kv = dict(line.split("=", 1) for line in path.read_text().splitlines() if line.strip())
        cfg = GenConfig(int(kv["height"]), int(kv["width"]), int(kv["min_instances"]),
                        int(kv["max_instances"]), int(kv["seed"]))
        return cfg, int(kv["count"])
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad dataset meta file ({exc})") from exc


def read_dataset(directory) -> list[LayoutSample]:
    d = Path(directory)
    cfg, count = read_meta(d)
    records = read_records(d / ANNOTATION_NAME)
    if len(records) != count:
        raise FormatError(f"{d / ANNOTATION_NAME}: {len(records)} records, meta says {count}")
    samples = []
    for rec in sorted(records, key=lambda r: r.image_id):
        img = read_ppm(d / _image_name(rec.image_id))
        if img.shape != (3, cfg.H, cfg.W):
            raise FormatError(f"{d / _image_name(rec.image_id)}: size {img.shape[1:]} != {(cfg.H, cfg.W)}")
        samples.append(LayoutSample(img, [GtInstance(i.class_id, i.mask) for i in rec.instances],
                                    (cfg.seed ^ rec.image_id) & MASK64))
    return samples
