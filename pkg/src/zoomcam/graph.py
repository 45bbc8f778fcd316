"""Minimal chain CNN: forward inference with an activation tape, reverse-mode
gradients of a class score w.r.t. any layer output, and a finite-difference
checker.

Activations are float64 arrays in NCHW layout (NC for flat layers). Public
entry points take batch size 1; the per-layer kernels accept any batch size so
the gradient checker can replay many perturbations at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import ClassVar, Mapping, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphError(ValueError):
    """Raised for malformed models, shape mismatches and bad layer lookups."""


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    bias: bool = False
    kind: ClassVar[str] = "conv2d"


@dataclass(frozen=True)
class ReLU:
    name: str
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class MaxPool:
    name: str
    kh: int
    kw: int
    stride_h: int
    stride_w: int
    kind: ClassVar[str] = "maxpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str
    kind: ClassVar[str] = "gap"


@dataclass(frozen=True)
class Flatten:
    name: str
    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class Linear:
    name: str
    in_dim: int
    out_dim: int
    bias: bool = False
    kind: ClassVar[str] = "linear"


LayerSpec = Union[Conv2d, ReLU, MaxPool, GlobalAvgPool, Flatten, Linear]
LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, ReLU, MaxPool, GlobalAvgPool, Flatten, Linear)}


def param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Expected parameter shapes for a layer ({} for parameter-free layers)."""
    if isinstance(layer, Conv2d):
        shapes = {"weight": (layer.out_ch, layer.in_ch, layer.kh, layer.kw)}
        if layer.bias:
            shapes["bias"] = (layer.out_ch,)
        return shapes
    if isinstance(layer, Linear):
        shapes = {"weight": (layer.out_dim, layer.in_dim)}
        if layer.bias:
            shapes["bias"] = (layer.out_dim,)
        return shapes
    return {}


def _out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    # shape excludes the batch dimension
    def need4d():
        if len(shape) != 3:
            raise GraphError(f"layer {layer.name!r} ({layer.kind}) needs a CxHxW input, got {shape}")

    if isinstance(layer, Conv2d):
        need4d()
        c, h, w = shape
        if c != layer.in_ch:
            raise GraphError(f"layer {layer.name!r}: expected {layer.in_ch} input channels, got {c}")
        if min(layer.kh, layer.kw, layer.stride_h, layer.stride_w) < 1 or min(layer.pad_h, layer.pad_w) < 0:
            raise GraphError(f"layer {layer.name!r}: invalid kernel/stride/padding")
        oh = (h + 2 * layer.pad_h - layer.kh) // layer.stride_h + 1
        ow = (w + 2 * layer.pad_w - layer.kw) // layer.stride_w + 1
        if h + 2 * layer.pad_h < layer.kh or w + 2 * layer.pad_w < layer.kw:
            raise GraphError(f"layer {layer.name!r}: kernel larger than padded input {shape}")
        return (layer.out_ch, oh, ow)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool):
        need4d()
        c, h, w = shape
        if min(layer.kh, layer.kw, layer.stride_h, layer.stride_w) < 1:
            raise GraphError(f"layer {layer.name!r}: invalid pooling window")
        if h < layer.kh or w < layer.kw:
            raise GraphError(f"layer {layer.name!r}: pooling window larger than input {shape}")
        return (c, (h - layer.kh) // layer.stride_h + 1, (w - layer.kw) // layer.stride_w + 1)
    if isinstance(layer, GlobalAvgPool):
        need4d()
        return (shape[0],)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Linear):
        if len(shape) != 1:
            raise GraphError(f"layer {layer.name!r}: linear layer needs a flat input, got {shape}; insert a Flatten")
        if shape[0] != layer.in_dim:
            raise GraphError(f"layer {layer.name!r}: expected input dim {layer.in_dim}, got {shape[0]}")
        return (layer.out_dim,)
    raise GraphError(f"unsupported layer type {type(layer).__name__}")


class ModelGraph:
    """Immutable chain of layers with float64 parameters.

    ``params`` maps layer name to ``{"weight": ..., "bias": ...}``. Arrays are
    copied and made read-only, so later changes to the caller's arrays have no
    effect on the model.
    """

    def __init__(
        self,
        input_shape: Sequence[int],
        layers: Sequence[LayerSpec],
        params: Mapping[str, Mapping[str, np.ndarray]] | None = None,
        class_count: int | None = None,
    ):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers: tuple[LayerSpec, ...] = tuple(layers)
        if not self.layers:
            raise GraphError("model has no layers")
        params = params or {}

        names = [layer.name for layer in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise GraphError(f"duplicate layer names: {', '.join(dupes)}")
        self._index = {n: i for i, n in enumerate(names)}

        unknown = set(params) - set(names)
        if unknown:
            raise GraphError(f"parameters given for unknown layers: {sorted(unknown)}")

        frozen = {}
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            shape = _out_shape(layer, shape)
            shapes.append(shape)
            expected = param_shapes(layer)
            given = params.get(layer.name, {})
            if set(given) != set(expected):
                raise GraphError(
                    f"layer {layer.name!r}: expected parameters {sorted(expected)}, got {sorted(given)}"
                )
            layer_params = {}
            for key, exp in expected.items():
                arr = np.array(given[key], dtype=np.float64)
                if arr.shape != exp:
                    raise GraphError(f"layer {layer.name!r}: {key} has shape {arr.shape}, expected {exp}")
                if not np.all(np.isfinite(arr)):
                    raise GraphError(f"layer {layer.name!r}: {key} contains non-finite values")
                arr.flags.writeable = False
                layer_params[key] = arr
            if layer_params:
                frozen[layer.name] = MappingProxyType(layer_params)
        if len(shapes[-1]) != 1:
            raise GraphError(f"final layer {self.layers[-1].name!r} must produce a flat score vector, got {shapes[-1]}")
        if class_count is not None and shapes[-1][0] != class_count:
            raise GraphError(f"final layer produces {shapes[-1][0]} scores, class_count is {class_count}")
        self.class_count = shapes[-1][0]
        self.params = MappingProxyType(frozen)
        self.shapes: tuple[tuple[int, ...], ...] = tuple(shapes)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise GraphError(f"unknown layer {name!r}") from None

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def with_params(self, updates: Mapping[str, Mapping[str, np.ndarray]]) -> "ModelGraph":
        """Copy of the model with some layers' parameters replaced."""
        merged = {name: dict(p) for name, p in self.params.items()}
        for name, p in updates.items():
            merged.setdefault(name, {}).update(p)
        return ModelGraph(self.input_shape, self.layers, merged, self.class_count)

    def __repr__(self):
        body = ", ".join(f"{l.name}:{l.kind}" for l in self.layers)
        return f"ModelGraph(input={self.input_shape}, [{body}])"


@dataclass
class ActivationTape:
    """Per-inference record: each layer's input and output, the frozen
    nonlinearity masks (ReLU pass-through, max-pool argmax) and the scores."""

    layer_names: tuple[str, ...]
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    masks: list[np.ndarray | None]
    scores: np.ndarray = field(repr=False)

    def output(self, name: str) -> np.ndarray:
        return self.outputs[self._idx(name)]

    def input(self, name: str) -> np.ndarray:
        return self.inputs[self._idx(name)]

    def _idx(self, name: str) -> int:
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise GraphError(f"unknown layer {name!r}") from None


# ---------------------------------------------------------------- kernels


def _conv_forward(x, layer: Conv2d, p):
    xp = np.pad(x, ((0, 0), (0, 0), (layer.pad_h, layer.pad_h), (layer.pad_w, layer.pad_w)))
    win = sliding_window_view(xp, (layer.kh, layer.kw), axis=(2, 3))
    win = win[:, :, :: layer.stride_h, :: layer.stride_w]
    # (N, C, OH, OW, kh, kw) x (O, C, kh, kw) -> (N, OH, OW, O)
    out = np.tensordot(win, p["weight"], axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if layer.bias:
        out += p["bias"][None, :, None, None]
    return out


def _conv_backward(g, layer: Conv2d, p, in_shape):
    n, c, h, w = in_shape
    oh, ow = g.shape[2], g.shape[3]
    # (O, C, kh, kw) x (N, O, OH, OW) -> (C, kh, kw, N, OH, OW)
    taps = np.tensordot(p["weight"], g, axes=([0], [1]))
    gp = np.zeros((n, c, h + 2 * layer.pad_h, w + 2 * layer.pad_w))
    sh, sw = layer.stride_h, layer.stride_w
    for u in range(layer.kh):
        for v in range(layer.kw):
            gp[:, :, u : u + sh * (oh - 1) + 1 : sh, v : v + sw * (ow - 1) + 1 : sw] += taps[:, u, v].transpose(1, 0, 2, 3)
    return gp[:, :, layer.pad_h : layer.pad_h + h, layer.pad_w : layer.pad_w + w]


def _maxpool_forward(x, layer: MaxPool):
    win = sliding_window_view(x, (layer.kh, layer.kw), axis=(2, 3))
    win = win[:, :, :: layer.stride_h, :: layer.stride_w]
    flat = win.reshape(win.shape[:4] + (-1,))
    # np.argmax returns the first maximal entry: row-major tie-break
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(g, layer: MaxPool, arg, in_shape):
    n, c, h, w = in_shape
    oh, ow = g.shape[2], g.shape[3]
    rows = np.arange(oh)[:, None] * layer.stride_h + arg // layer.kw
    cols = np.arange(ow)[None, :] * layer.stride_w + arg % layer.kw
    gx = np.zeros(in_shape)
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    ni = np.broadcast_to(ni[:, :, None, None], g.shape)
    ci = np.broadcast_to(ci[:, :, None, None], g.shape)
    np.add.at(gx, (ni, ci, rows, cols), g)
    return gx


def _layer_forward(layer: LayerSpec, x, p):
    """Returns (output, mask). ``mask`` is None for layers without a frozen nonlinearity."""
    if isinstance(layer, Conv2d):
        return _conv_forward(x, layer, p), None
    if isinstance(layer, ReLU):
        mask = x > 0
        return np.where(mask, x, 0.0), mask
    if isinstance(layer, MaxPool):
        return _maxpool_forward(x, layer)
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3)), None
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), None
    if isinstance(layer, Linear):
        out = x @ p["weight"].T
        if layer.bias:
            out = out + p["bias"]
        return out, None
    raise GraphError(f"unsupported layer type {type(layer).__name__}")


def _layer_backward(layer: LayerSpec, g, p, mask, in_shape):
    if isinstance(layer, Conv2d):
        return _conv_backward(g, layer, p, in_shape)
    if isinstance(layer, ReLU):
        return g * mask
    if isinstance(layer, MaxPool):
        return _maxpool_backward(g, layer, mask, in_shape)
    if isinstance(layer, GlobalAvgPool):
        h, w = in_shape[2], in_shape[3]
        return np.broadcast_to(g[:, :, None, None] / (h * w), in_shape).copy()
    if isinstance(layer, Flatten):
        return g.reshape(in_shape)
    if isinstance(layer, Linear):
        return g @ p["weight"]
    raise GraphError(f"unsupported layer type {type(layer).__name__}")


# ---------------------------------------------------------------- public API


def forward(model: ModelGraph, x: np.ndarray) -> tuple[np.ndarray, ActivationTape]:
    """Run inference on a single image of shape ``(1, *model.input_shape)``.

    Returns the pre-softmax score vector and the activation tape.
    """
    x = np.asarray(x, dtype=np.float64)
    expected = (1,) + model.input_shape
    if x.shape != expected:
        raise GraphError(f"input shape {x.shape} does not match model input {expected}")
    if not np.all(np.isfinite(x)):
        raise GraphError("input contains non-finite values")
    inputs, outputs, masks = [], [], []
    for layer in model.layers:
        out, mask = _layer_forward(layer, x, model.params.get(layer.name))
        if not np.all(np.isfinite(out)):
            raise GraphError(f"layer {layer.name!r} produced non-finite values")
        inputs.append(x)
        outputs.append(out)
        masks.append(mask)
        x = out
    scores = outputs[-1][0].copy()
    tape = ActivationTape(model.layer_names, inputs, outputs, masks, scores)
    return scores, tape


def replay(model: ModelGraph, x: np.ndarray, start: int) -> tuple[np.ndarray, list[np.ndarray | None]]:
    """Run layers ``start..end`` on a batch ``x``; returns (scores, masks)."""
    masks = []
    for layer in model.layers[start:]:
        x, mask = _layer_forward(layer, x, model.params.get(layer.name))
        masks.append(mask)
    return x, masks


def _check_tape(model: ModelGraph, tape: ActivationTape):
    if tape.layer_names != model.layer_names:
        raise GraphError("tape was recorded on a model with a different layer structure")


def _check_class(model: ModelGraph, class_idx: int):
    if not 0 <= class_idx < model.class_count:
        raise GraphError(f"class index {class_idx} out of range [0, {model.class_count})")


def backward_to_layer(model: ModelGraph, tape: ActivationTape, class_idx: int, layer_name: str) -> np.ndarray:
    """Gradient of score ``class_idx`` w.r.t. the output of ``layer_name``.

    ReLU and max-pool layers use the masks frozen in the tape; the forward
    pass is never recomputed.
    """
    _check_tape(model, tape)
    _check_class(model, class_idx)
    stop = model.index(layer_name)
    g = np.zeros((1, model.class_count))
    g[0, class_idx] = 1.0
    for i in range(len(model.layers) - 1, stop, -1):
        layer = model.layers[i]
        g = _layer_backward(layer, g, model.params.get(layer.name), tape.masks[i], tape.inputs[i].shape)
    return g


def finite_difference(
    model: ModelGraph,
    tape: ActivationTape,
    class_idx: int,
    layer_name: str,
    step: float = 1e-5,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of a class score w.r.t. a layer output.

    Every activation of the layer is perturbed by ``+-step`` and the rest of
    the network replayed. Returns ``(grad, kink)`` where ``kink`` flags
    coordinates whose perturbation flipped any downstream ReLU or max-pool
    decision recorded in the tape; the difference quotient is not a
    derivative there.
    """
    if not step > 0:
        raise GraphError("step must be positive")
    _check_tape(model, tape)
    _check_class(model, class_idx)
    idx = model.index(layer_name)
    base = tape.outputs[idx]
    size = base.size
    fd = np.empty(size)
    kink = np.zeros(size, dtype=bool)
    ref_masks = tape.masks[idx + 1 :]
    for lo in range(0, size, chunk):
        hi = min(lo + chunk, size)
        coords = np.arange(lo, hi)
        n = hi - lo
        # extended precision keeps the difference quotient's roundoff far below
        # the gradients being checked
        batch = np.repeat(base.reshape(1, -1).astype(np.longdouble), 2 * n, axis=0)
        batch[np.arange(n), coords] += step
        batch[np.arange(n, 2 * n), coords] -= step
        scores, masks = replay(model, batch.reshape((2 * n,) + base.shape[1:]), idx + 1)
        fd[lo:hi] = (scores[:n, class_idx] - scores[n:, class_idx]) / (2 * np.longdouble(step))
        flipped = np.zeros(2 * n, dtype=bool)
        for m, ref in zip(masks, ref_masks):
            if m is None:
                continue
            flipped |= np.any((m != ref).reshape(2 * n, -1), axis=1)
        kink[lo:hi] = flipped[:n] | flipped[n:]
    return fd.reshape(base.shape), kink.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor * max(|a|, |b|) over all entries).

    The floor keeps entries that are tiny relative to the largest gradient
    from dominating through roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mag = np.maximum(np.abs(a), np.abs(b))
    scale = floor * mag.max() if mag.size else 0.0
    return np.abs(a - b) / np.maximum(mag, max(scale, np.finfo(np.float64).tiny))


def grad_check(
    model: ModelGraph,
    x: np.ndarray,
    class_idx: int,
    layer_name: str,
    step: float = 1e-5,
) -> float:
    """Max relative error between the backward pass and central finite
    differences over the non-kink activations of ``layer_name``."""
    if not step > 0:
        raise GraphError("step must be positive")
    _, tape = forward(model, x)
    grad = backward_to_layer(model, tape, class_idx, layer_name)
    fd, kink = finite_difference(model, tape, class_idx, layer_name, step)
    err = relative_error(grad, fd)[~kink]
    return float(err.max()) if err.size else 0.0
