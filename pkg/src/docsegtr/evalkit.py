"""Mask IoU, RLE codec, and COCO-style mask average precision.

Annotation/prediction files ("docsegtr-eval v1") are text: a header line
``docsegtr-eval v1`` followed by one JSON object per image::

    {"image_id": 0, "width": 128, "height": 128,
     "instances": [{"class_id": 2, "score": 0.93, "rle_counts": [5, 12, ...]}]}

``score`` is present on predictions only. ``rle_counts`` alternate zero-run
and one-run lengths over the row-major mask, starting with a (possibly
empty) zero-run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ShapeError

HEADER = "docsegtr-eval v1"
IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts) or sum(self.counts) != self.height * self.width:
            raise FormatError(f"RLE counts sum to {sum(self.counts)}, expected {self.height * self.width}")


def rle_encode(mask: np.ndarray) -> RleMask:
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    flat = m.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(h, w, tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    if sum(rle.counts) != rle.height * rle.width:
        raise FormatError(f"RLE counts sum to {sum(rle.counts)}, expected {rle.height * rle.width}")
    vals = np.arange(len(rle.counts)) % 2
    return np.repeat(vals.astype(bool), rle.counts).reshape(rle.height, rle.width)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# records


@dataclass
class InstanceRecord:
    class_id: int
    mask: np.ndarray
    score: Optional[float] = None


@dataclass
class ImageRecord:
    image_id: int
    width: int
    height: int
    instances: list[InstanceRecord] = field(default_factory=list)


def dumps_records(records: Sequence[ImageRecord]) -> str:
    lines = [HEADER]
    for rec in records:
        insts = []
        for inst in rec.instances:
            d: dict = {"class_id": int(inst.class_id)}
            if inst.score is not None:
                d["score"] = float(inst.score)
            d["rle_counts"] = list(rle_encode(inst.mask).counts)
            insts.append(d)
        lines.append(json.dumps({"image_id": int(rec.image_id), "width": int(rec.width),
                                 "height": int(rec.height), "instances": insts}, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def write_records(path, records: Sequence[ImageRecord]) -> None:
    Path(path).write_text(dumps_records(records))


def read_records(path) -> list[ImageRecord]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if not lines or lines[0].strip() != HEADER:
        raise FormatError(f"{path}: missing '{HEADER}' header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            h, w = int(d["height"]), int(d["width"])
            insts = [InstanceRecord(int(i["class_id"]),
                                    rle_decode(RleMask(h, w, tuple(int(c) for c in i["rle_counts"]))),
                                    float(i["score"]) if "score" in i else None)
                     for i in d["instances"]]
            out.append(ImageRecord(int(d["image_id"]), w, h, insts))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# average precision


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    ap: float
    ap50: float
    ap75: float

    def table(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = [class_names[c] if class_names and c < len(class_names) else f"class{c}"
                 for c in self.per_class_ap]
        head = ["AP", "AP@0.5", "AP@0.75"] + names
        vals = [self.ap, self.ap50, self.ap75] + list(self.per_class_ap.values())
        width = max(8, *(len(h) for h in head))
        top = " ".join(h.rjust(width) for h in head)
        row = " ".join(f"{v:.3f}".rjust(width) for v in vals)
        return f"{top}\n{row}"


def _precision_envelope(tp_flags: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # max precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _match(preds, gts, iou_thr: float) -> np.ndarray:
    """Greedy score-ordered matching; ``preds`` must already be sorted."""
    used: dict[int, set] = {}
    flags = np.zeros(len(preds), dtype=bool)
    for k, (img, _, pmask) in enumerate(preds):
        best, best_iou = -1, iou_thr
        taken = used.setdefault(img, set())
        for g, gmask in enumerate(gts.get(img, [])):
            if g in taken:
                continue
            iou = mask_iou(pmask, gmask)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            taken.add(best)
            flags[k] = True
    return flags


def average_precision(preds: Sequence[tuple], gts: dict, iou_thr: float) -> float:
    """101-point interpolated AP for one class.

    ``preds`` holds ``(image_id, score, mask)`` tuples; ``gts`` maps image_id
    to the list of ground-truth masks. Returns NaN when there is no ground
    truth.
    """
    n_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(preds)), key=lambda k: -preds[k][1])
    ranked = [preds[k] for k in order]
    return _precision_envelope(_match(ranked, gts, iou_thr), n_gt)


def _group(preds: Sequence[ImageRecord], gts: Sequence[ImageRecord]):
    classes = sorted({i.class_id for rec in gts for i in rec.instances})
    gt_by = {c: {} for c in classes}
    for rec in gts:
        for inst in rec.instances:
            gt_by[inst.class_id].setdefault(rec.image_id, []).append(np.asarray(inst.mask, dtype=bool))
    pred_by = {c: [] for c in classes}
    for rec in preds:
        for inst in rec.instances:
            if inst.class_id in pred_by:
                score = 1.0 if inst.score is None else inst.score
                pred_by[inst.class_id].append((rec.image_id, score, np.asarray(inst.mask, dtype=bool)))
    return classes, gt_by, pred_by


def coco_map(preds: Sequence[ImageRecord], gts: Sequence[ImageRecord]) -> EvalReport:
    """Mask AP averaged over IoU thresholds 0.50:0.05:0.95 and over classes present in GT."""
    classes, gt_by, pred_by = _group(preds, gts)
    if not classes:
        return EvalReport({}, 0.0, 0.0, 0.0)
    table = np.array([[average_precision(pred_by[c], gt_by[c], t) for t in IOU_THRESHOLDS] for c in classes])
    per_class = {c: float(table[k].mean()) for k, c in enumerate(classes)}
    i50 = int(np.flatnonzero(IOU_THRESHOLDS == 0.5)[0])
    i75 = int(np.flatnonzero(IOU_THRESHOLDS == 0.75)[0])
    return EvalReport(per_class, float(table.mean()), float(table[:, i50].mean()), float(table[:, i75].mean()))
