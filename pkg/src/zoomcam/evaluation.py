"""Localization error (ILSVRC-style top-k) and segmentation IoU / mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .labeling import BBox

IGNORE_LABEL = 255


class EvalError(ValueError):
    pass


def iou_box(a: BBox, b: BBox) -> float:
    """Intersection over union of two inclusive-pixel boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    inter = max(iw, 0) * max(ih, 0)
    return inter / (a.area + b.area - inter)


@dataclass
class LocRecord:
    gt_class: int
    gt_boxes: list[BBox]
    ranking: list[int]
    boxes: Mapping[int, BBox] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.ranking)) != len(self.ranking):
            raise EvalError("predicted ranking contains duplicate classes")

    def hit(self, k: int, min_iou: float = 0.5) -> bool:
        if self.gt_class not in self.ranking[:k]:
            return False
        box = self.boxes.get(self.gt_class)
        if box is None:
            return False
        return any(iou_box(box, gt) > min_iou for gt in self.gt_boxes)


def topk_localization_error(records: Sequence[LocRecord], k: int) -> float:
    """Percentage of records without a top-k class hit whose box overlaps a
    ground-truth box by IoU > 0.5."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if not records:
        raise EvalError("no records to evaluate")
    hits = sum(r.hit(k) for r in records)
    return 100.0 * (1.0 - hits / len(records))


@dataclass
class SegRecord:
    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.pred = np.asarray(self.pred)
        self.gt = np.asarray(self.gt)
        if self.pred.shape != self.gt.shape:
            raise EvalError(f"prediction {self.pred.shape} and ground truth {self.gt.shape} differ in size")


def _as_records(records) -> list[SegRecord]:
    out = [r if isinstance(r, SegRecord) else SegRecord(*r) for r in records]
    if not out:
        raise EvalError("no records to evaluate")
    return out


def class_ious(records, class_count: int) -> np.ndarray:
    """Per-class IoU for classes 0..class_count; NaN where a class is absent
    from both predictions and ground truth."""
    recs = _as_records(records)
    n = class_count + 1
    tp = np.zeros(n, dtype=np.int64)
    fp = np.zeros(n, dtype=np.int64)
    fn = np.zeros(n, dtype=np.int64)
    for r in recs:
        gt = r.gt.ravel().astype(np.int64)
        pred = r.pred.ravel().astype(np.int64)
        keep = gt != IGNORE_LABEL
        gt, pred = gt[keep], pred[keep]
        if np.any((gt < 0) | (gt >= n)):
            raise EvalError("ground truth contains labels outside 0..class_count")
        same = gt == pred
        tp += np.bincount(gt[same], minlength=n)[:n]
        fn += np.bincount(gt[~same], minlength=n)[:n]
        wrong = pred[~same]
        wrong = wrong[(wrong >= 0) & (wrong < n)]
        fp += np.bincount(wrong, minlength=n)[:n]
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def iou_seg(records, class_id: int) -> float:
    """Pooled IoU of one class (NaN when it appears nowhere)."""
    if class_id < 0:
        raise EvalError("class id must be nonnegative")
    tp = fp = fn = 0
    for r in _as_records(records):
        keep = r.gt != IGNORE_LABEL
        gt = r.gt[keep] == class_id
        pred = r.pred[keep] == class_id
        tp += int(np.sum(gt & pred))
        fp += int(np.sum(pred & ~gt))
        fn += int(np.sum(gt & ~pred))
    denom = tp + fp + fn
    return tp / denom if denom else float("nan")


def miou(records, class_count: int) -> float:
    """Unweighted mean IoU over classes 0..class_count present in the records."""
    ious = class_ious(records, class_count)
    present = ious[~np.isnan(ious)]
    if present.size == 0:
        raise EvalError("no class present in the records")
    return float(present.mean())
