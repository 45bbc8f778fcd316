"""End-to-end helpers shared by the library API and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .aggregation import LayerPolicy, aggregate, select_layers
from .graph import ActivationTape, ModelGraph, forward
from .labeling import BBox, fuse_multilabel, largest_component_bbox, threshold_relative
from .saliency import SaliencyError, SaliencyMap, cam, grad_cam, zoom_cam_layer

METHODS = ("cam", "gradcam", "zoomcam")
# relative thresholds used for localization with each method
DEFAULT_TAU = {"zoomcam": 0.25, "gradcam": 0.15, "cam": 0.25}


def layer_maps(
    model: ModelGraph, tape: ActivationTape, class_idx: int, method: str = "zoomcam", layers: LayerPolicy = "all"
) -> list[SaliencyMap]:
    """Native-resolution maps that make up one visual explanation."""
    if method == "cam":
        return [cam(model, tape, class_idx)]
    if method == "gradcam":
        return [grad_cam(model, tape, class_idx)]
    if method == "zoomcam":
        return [zoom_cam_layer(model, tape, class_idx, n) for n in select_layers(model, layers)]
    raise SaliencyError(f"unknown method {method!r} (expected one of {', '.join(METHODS)})")


def explain(
    model: ModelGraph, image: np.ndarray, class_idx: int, method: str = "zoomcam", layers: LayerPolicy = "all"
) -> SaliencyMap:
    """Visual explanation at input resolution: each map normalized,
    upsampled to the image grid and max-fused."""
    _, tape = forward(model, image)
    size = model.input_shape[1:]
    return aggregate(layer_maps(model, tape, class_idx, method, layers), size=size)


def localize(smap: SaliencyMap, tau: float = 0.25, connectivity: int = 8) -> BBox:
    return largest_component_bbox(threshold_relative(smap, tau), connectivity)


def pseudo_segment(
    model: ModelGraph,
    image: np.ndarray,
    classes: Sequence[int],
    tau: float = 0.25,
    method: str = "zoomcam",
    layers: LayerPolicy = "all",
) -> np.ndarray:
    """Per-pixel labels (model class index + 1, 0 = background) fused from
    the explanations of ``classes``."""
    if not classes:
        raise SaliencyError("no classes given")
    _, tape = forward(model, image)
    size = model.input_shape[1:]
    maps = {
        c + 1: aggregate(layer_maps(model, tape, c, method, layers), size=size)
        for c in dict.fromkeys(classes)
    }
    return fuse_multilabel(maps, tau)
