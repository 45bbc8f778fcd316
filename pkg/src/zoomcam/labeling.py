"""Pseudo-labels from saliency maps: relative thresholding, connected
components, bounding boxes and multi-class fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np
from scipy import ndimage

from .saliency import SaliencyMap

MapLike = Union[SaliencyMap, np.ndarray]


class LabelingError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned box with inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (0 <= self.x_min <= self.x_max and 0 <= self.y_min <= self.y_max):
            raise LabelingError(f"invalid box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def to_text(self) -> str:
        return f"{self.x_min} {self.y_min} {self.x_max} {self.y_max}\n"

    @classmethod
    def from_text(cls, text: str) -> "BBox":
        parts = text.split()
        if len(parts) != 4:
            raise LabelingError(f"expected 4 box coordinates, got {text!r}")
        return cls(*(int(p) for p in parts))


def _values(m: MapLike) -> np.ndarray:
    return m.values if isinstance(m, SaliencyMap) else np.asarray(m, dtype=np.float64)


def threshold_relative(smap: MapLike, tau: float) -> np.ndarray:
    """Boolean mask of pixels strictly above ``tau`` times the map maximum."""
    if not 0 < tau < 1:
        raise LabelingError(f"tau must lie in (0, 1), got {tau}")
    v = _values(smap)
    peak = v.max() if v.size else 0.0
    if peak <= 0:
        return np.zeros(v.shape, dtype=bool)
    return v > tau * peak


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise LabelingError(f"connectivity must be 4 or 8, got {connectivity}")


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Integer label image (0 = background) and component count.

    Labels are numbered in raster order of each component's first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise LabelingError(f"mask must be 2-D, got shape {mask.shape}")
    labels, count = ndimage.label(mask, structure=_structure(connectivity))
    return labels, int(count)


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Maximal connected sets of true pixels, each as an (n, 2) array of
    (row, col) coordinates in raster order."""
    labels, count = label_components(mask, connectivity)
    if count == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, count + 2))
    width = labels.shape[1]
    comps = []
    for k in range(count):
        idx = order[bounds[k] : bounds[k + 1]]
        comps.append(np.stack([idx // width, idx % width], axis=1))
    return comps


def component_bbox(pixels: np.ndarray) -> BBox:
    rows, cols = pixels[:, 0], pixels[:, 1]
    return BBox(int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def component_boxes(mask: np.ndarray, connectivity: int = 8) -> list[BBox]:
    return [component_bbox(c) for c in connected_components(mask, connectivity)]


def largest_component_bbox(mask: np.ndarray, connectivity: int = 8) -> BBox:
    """Tight box around the largest component.

    Size ties go to the component with the smallest (y_min, x_min).
    """
    comps = connected_components(mask, connectivity)
    if not comps:
        raise LabelingError("no foreground")
    boxes = [component_bbox(c) for c in comps]
    best = min(range(len(comps)), key=lambda i: (-len(comps[i]), boxes[i].y_min, boxes[i].x_min))
    return boxes[best]


def fuse_multilabel(maps_by_class: Mapping[int, MapLike], tau: float) -> np.ndarray:
    """Per-pixel class labels from several class maps.

    A class is a candidate at a pixel when its value passes its own relative
    threshold. Candidates are compared on their max-normalized values; the
    largest wins, ties going to the lower class id. Pixels with no candidate
    are background (0).
    """
    if not maps_by_class:
        raise LabelingError("no class maps to fuse")
    class_ids = sorted(maps_by_class)
    if class_ids[0] < 1:
        raise LabelingError("foreground class ids must be >= 1")
    values = [_values(maps_by_class[c]) for c in class_ids]
    shape = values[0].shape
    if any(v.shape != shape for v in values):
        raise LabelingError("class maps differ in size")
    peaks = [v.max() if v.size else 0.0 for v in values]
    stack = np.stack([v / p if p > 0 else np.zeros_like(v) for v, p in zip(values, peaks)])
    passing = np.stack([threshold_relative(v, tau) for v in values])
    scored = np.where(passing, stack, -np.inf)
    # argmax keeps the first (lowest class id) of tied maxima
    best = np.argmax(scored, axis=0)
    labels = np.asarray(class_ids)[best]
    return np.where(passing.any(axis=0), labels, 0).astype(np.int64)
