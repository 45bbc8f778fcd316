"""Class-discriminative maps: CAM, Grad-CAM (last layer and any layer), the
full-gradient weight masks and the per-layer Zoom-CAM map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import (
    ActivationTape,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    GraphError,
    Linear,
    ModelGraph,
    ReLU,
    backward_to_layer,
)


class SaliencyError(GraphError):
    pass


@dataclass
class SaliencyMap:
    """Single-channel nonnegative map with class and layer provenance."""

    values: np.ndarray
    class_idx: int
    layer_name: str
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise SaliencyError(f"saliency map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise SaliencyError("saliency map contains non-finite values")
        if np.any(self.values < 0):
            raise SaliencyError("saliency map values must be nonnegative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ChannelWeights:
    """Per-channel weights of a feature layer plus the number of spatial
    positions ``z`` the weights were averaged over."""

    values: np.ndarray
    z: int


def conv_block_outputs(model: ModelGraph) -> list[str]:
    """Shallow-to-deep output names of each conv block: the ReLU directly
    after a Conv2d, or the Conv2d itself when no ReLU follows it."""
    names = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            nxt = model.layers[i + 1] if i + 1 < len(model.layers) else None
            names.append(nxt.name if isinstance(nxt, ReLU) else layer.name)
    return names


def last_conv_layer(model: ModelGraph) -> str:
    blocks = conv_block_outputs(model)
    if not blocks:
        raise SaliencyError("model has no convolutional layer")
    return blocks[-1]


def _feature(model: ModelGraph, tape: ActivationTape, layer_name: str) -> np.ndarray:
    act = tape.output(layer_name)
    if act.ndim != 4:
        raise SaliencyError(f"layer {layer_name!r} output is not a spatial activation (shape {act.shape})")
    model.index(layer_name)
    return act[0]


def _check_class(model, class_idx):
    if not 0 <= class_idx < model.class_count:
        raise SaliencyError(f"class index {class_idx} out of range [0, {model.class_count})")


def _gap_head(model: ModelGraph) -> tuple[int, Linear]:
    layers = model.layers
    if len(layers) >= 2 and isinstance(layers[-1], Linear):
        if isinstance(layers[-2], GlobalAvgPool):
            return len(layers) - 2, layers[-1]
        if len(layers) >= 3 and isinstance(layers[-2], Flatten) and isinstance(layers[-3], GlobalAvgPool):
            return len(layers) - 3, layers[-1]
    raise SaliencyError("CAM requires GAP architecture (GlobalAvgPool [+ Flatten] + Linear head)")


def cam_weights(model: ModelGraph, class_idx: int) -> ChannelWeights:
    gap_idx, head = _gap_head(model)
    _check_class(model, class_idx)
    h, w = model.shapes[gap_idx - 1][1:] if gap_idx > 0 else model.input_shape[1:]
    return ChannelWeights(np.array(model.params[head.name]["weight"][class_idx]), h * w)


def cam(model: ModelGraph, tape: ActivationTape, class_idx: int) -> SaliencyMap:
    """Class activation map: the GAP input weighted by the head's class row."""
    gap_idx, _ = _gap_head(model)
    weights = cam_weights(model, class_idx)
    if gap_idx == 0:
        raise SaliencyError("CAM requires a feature layer before global average pooling")
    name = model.layers[gap_idx - 1].name
    act = _feature(model, tape, name)
    values = np.maximum(np.tensordot(weights.values, act, axes=1), 0.0)
    return SaliencyMap(values, class_idx, name)


def grad_cam_weights(model: ModelGraph, tape: ActivationTape, class_idx: int, layer_name: str) -> ChannelWeights:
    """Spatially averaged gradients of the class score, one per channel."""
    _check_class(model, class_idx)
    _feature(model, tape, layer_name)
    grad = backward_to_layer(model, tape, class_idx, layer_name)[0]
    return ChannelWeights(grad.mean(axis=(1, 2)), grad.shape[1] * grad.shape[2])


def grad_cam_layer(model: ModelGraph, tape: ActivationTape, class_idx: int, layer_name: str) -> SaliencyMap:
    """Grad-CAM recipe evaluated at an arbitrary spatial layer."""
    act = _feature(model, tape, layer_name)
    weights = grad_cam_weights(model, tape, class_idx, layer_name)
    values = np.maximum(np.tensordot(weights.values, act, axes=1), 0.0)
    return SaliencyMap(values, class_idx, layer_name)


def grad_cam(model: ModelGraph, tape: ActivationTape, class_idx: int) -> SaliencyMap:
    return grad_cam_layer(model, tape, class_idx, last_conv_layer(model))


def weight_mask(model: ModelGraph, tape: ActivationTape, class_idx: int, layer_name: str) -> np.ndarray:
    """Full gradient of the class score w.r.t. a layer's output, used as a
    pointwise mask on that layer's activations."""
    _check_class(model, class_idx)
    return backward_to_layer(model, tape, class_idx, layer_name)


def contribution_map(model: ModelGraph, tape: ActivationTape, class_idx: int, layer_name: str) -> np.ndarray:
    """Channel-summed gradient x activation, before rectification.

    For bias-free models this sums to the class score at every layer.
    """
    act = _feature(model, tape, layer_name)
    grad = weight_mask(model, tape, class_idx, layer_name)[0]
    return (grad * act).sum(axis=0)


def zoom_cam_layer(model: ModelGraph, tape: ActivationTape, class_idx: int, layer_name: str) -> SaliencyMap:
    """Per-layer Zoom-CAM map at the layer's native resolution (unnormalized)."""
    values = np.maximum(contribution_map(model, tape, class_idx, layer_name), 0.0)
    return SaliencyMap(values, class_idx, layer_name)
