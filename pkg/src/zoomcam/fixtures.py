"""Deterministic test fixtures: seeded random nets and hand-built scenario
models written to disk for the command-line pipeline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool, ModelGraph, ReLU, _out_shape
from .io import save_model, save_tensor
from .labeling import BBox

SCENARIOS = ("small-object", "two-instance", "gap-head")


def random_net(
    rng: np.random.Generator,
    *,
    max_hw: int = 16,
    max_channels: int = 3,
    bias: bool = False,
    pool: bool = True,
    gap_head: bool = True,
) -> tuple[ModelGraph, np.ndarray]:
    """Small seeded VGG-style net (two conv+ReLU blocks, optional max-pool,
    GAP or flatten head) and a matching input image."""
    c_in = int(rng.integers(1, max_channels + 1))
    h = int(rng.integers(6, max_hw + 1))
    w = int(rng.integers(6, max_hw + 1))
    c1 = int(rng.integers(1, 5))
    c2 = int(rng.integers(1, 5))
    k1 = int(rng.choice([1, 3]))
    k2 = int(rng.choice([2, 3]))
    classes = int(rng.integers(2, 5))
    layers = [
        Conv2d("conv1", c_in, c1, k1, k1, 1, 1, k1 // 2, k1 // 2, bias=bias),
        ReLU("relu1"),
        Conv2d("conv2", c1, c2, k2, k2, 1, 1, k2 // 2, k2 // 2, bias=bias),
        ReLU("relu2"),
    ]
    if pool:
        layers.append(MaxPool("pool", 2, 2, 2, 2))
    params = {
        "conv1": {"weight": rng.normal(size=(c1, c_in, k1, k1))},
        "conv2": {"weight": rng.normal(size=(c2, c1, k2, k2)) / k2},
    }
    if bias:
        params["conv1"]["bias"] = rng.normal(size=c1) * 0.1
        params["conv2"]["bias"] = rng.normal(size=c2) * 0.1
    if gap_head:
        layers += [GlobalAvgPool("gap"), Linear("fc", c2, classes, bias=bias)]
        fc_in = c2
    else:
        shape = (c_in, h, w)
        for layer in layers:
            shape = _out_shape(layer, shape)
        fc_in = int(np.prod(shape))
        layers += [Flatten("flatten"), Linear("fc", fc_in, classes, bias=bias)]
    params["fc"] = {"weight": rng.normal(size=(classes, fc_in))}
    if bias:
        params["fc"]["bias"] = rng.normal(size=classes) * 0.1
    model = ModelGraph((c_in, h, w), layers, params)
    x = rng.normal(size=(1, c_in, h, w))
    return model, x


def ladder_net(channels: int, head: np.ndarray, size: int = 64) -> ModelGraph:
    """Hand-set bias-free detector net over a ``size`` x ``size`` image with
    one input channel per pattern.

    Each channel is processed independently: a 1x1 pattern detector, a 7x7
    box filter at full resolution, a stride-4 max-pool, a 7x7 box filter at
    quarter resolution, a second stride-4 max-pool and a 1x1 conv at the
    final grid, then GAP and the ``head`` (classes x channels) weights.
    Box filtering before each pool dilutes a small instance's response: it
    stays strong at full resolution but is a small fraction of a large
    instance's response on the final grid.
    """
    eye = np.eye(channels)
    # wider than the pool stride so each pixel collects several argmax taps
    box7 = np.zeros((channels, channels, 7, 7))
    for c in range(channels):
        box7[c, c] = 1.0 / 49.0
    layers = [
        Conv2d("conv1", channels, channels, 1, 1),
        ReLU("relu1"),
        Conv2d("conv2", channels, channels, 7, 7, 1, 1, 3, 3),
        ReLU("relu2"),
        MaxPool("pool1", 4, 4, 4, 4),
        Conv2d("conv3", channels, channels, 7, 7, 1, 1, 3, 3),
        ReLU("relu3"),
        MaxPool("pool2", 4, 4, 4, 4),
        Conv2d("conv4", channels, channels, 1, 1),
        ReLU("relu4"),
        GlobalAvgPool("gap"),
        Linear("fc", channels, head.shape[0]),
    ]
    params = {
        "conv1": {"weight": eye[:, :, None, None]},
        "conv2": {"weight": box7},
        "conv3": {"weight": box7},
        "conv4": {"weight": eye[:, :, None, None]},
        "fc": {"weight": head},
    }
    return ModelGraph((channels, size, size), layers, params)


@dataclass
class Scenario:
    """In-memory fixture: model, one input image and its ground truth.

    ``boxes`` holds (model class index, box) pairs; ``seg`` uses label
    ``class index + 1`` for foreground.
    """

    name: str
    model: ModelGraph
    image: np.ndarray
    boxes: list[tuple[int, BBox]] = field(default_factory=list)
    seg: np.ndarray | None = None

    @property
    def target_class(self) -> int:
        return self.boxes[0][0]


def _paint(image, seg, channel, label, y, x, size):
    image[0, channel, y : y + size, x : x + size] = 1.0
    seg[y : y + size, x : x + size] = label
    return BBox(x, y, x + size - 1, y + size - 1)


def small_object(seed: int) -> Scenario:
    """One 24x24 and one 4x4 instance of the same pattern on a 64x64 image.

    The large instance sits in the upper-left 32x32 quadrant and the small
    one inside the lower-right 16x16 cell of the final 4x4 grid, away from
    the large instance's spill.
    """
    rng = np.random.default_rng(seed)
    model = ladder_net(1, np.array([[1.0], [-1.0]]))
    image = np.zeros((1, 1, 64, 64))
    seg = np.zeros((64, 64), dtype=np.int64)
    by, bx = (int(v) for v in rng.integers(4, 9, size=2))
    sy, sx = (int(v) for v in rng.integers(50, 59, size=2))
    big = _paint(image, seg, 0, 1, by, bx, 24)
    small = _paint(image, seg, 0, 1, sy, sx, 4)
    return Scenario("small-object", model, image, [(0, big), (0, small)], seg)


def two_instance(seed: int) -> Scenario:
    """Two 16x16 instances of different patterns (one per input channel),
    for multi-class pseudo-segmentation."""
    rng = np.random.default_rng(seed)
    model = ladder_net(2, np.eye(2))
    image = np.zeros((1, 2, 64, 64))
    seg = np.zeros((64, 64), dtype=np.int64)
    ay, ax = (int(v) for v in rng.integers(4, 13, size=2))
    by, bx = (int(v) for v in rng.integers(36, 45, size=2))
    a = _paint(image, seg, 0, 1, ay, ax, 16)
    b = _paint(image, seg, 1, 2, by, bx, 16)
    return Scenario("two-instance", model, image, [(0, a), (1, b)], seg)


def gap_head(seed: int) -> Scenario:
    """Seeded random bias-free conv net with a GAP + Linear head and a noisy
    image containing one bright square."""
    rng = np.random.default_rng(seed)
    c1, c2, classes = 4, 4, 3
    layers = [
        Conv2d("conv1", 3, c1, 3, 3, 1, 1, 1, 1),
        ReLU("relu1"),
        MaxPool("pool1", 2, 2, 2, 2),
        Conv2d("conv2", c1, c2, 3, 3, 1, 1, 1, 1),
        ReLU("relu2"),
        GlobalAvgPool("gap"),
        Linear("fc", c2, classes),
    ]
    params = {
        "conv1": {"weight": rng.normal(size=(c1, 3, 3, 3)) / 3},
        "conv2": {"weight": rng.normal(size=(c2, c1, 3, 3)) / 3},
        "fc": {"weight": rng.normal(size=(classes, c2))},
    }
    model = ModelGraph((3, 32, 32), layers, params)
    image = rng.normal(scale=0.1, size=(1, 3, 32, 32))
    seg = np.zeros((32, 32), dtype=np.int64)
    y, x = (int(v) for v in rng.integers(4, 20, size=2))
    image[0, :, y : y + 8, x : x + 8] += 1.0
    seg[y : y + 8, x : x + 8] = 1
    box = BBox(x, y, x + 7, y + 7)
    return Scenario("gap-head", model, image, [(0, box)], seg)


def build_scenario(name: str, seed: int) -> Scenario:
    builders = {"small-object": small_object, "two-instance": two_instance, "gap-head": gap_head}
    if name not in builders:
        raise ValueError(f"unknown scenario {name!r} (expected one of {', '.join(SCENARIOS)})")
    return builders[name](seed)


def fixture_gen(name: str, seed: int, out_dir) -> list[Path]:
    """Write a scenario to ``out_dir``; returns the written paths.

    Files: ``model.json`` + ``model.weights``, ``input.zct`` (1xCxHxW),
    ``boxes.txt`` (``class xMin yMin xMax yMax`` per line), ``seg.zct``
    (HxW labels) and ``meta.json``.
    """
    sc = build_scenario(name, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(sc.model, out / "model.json", "model.weights")
    save_tensor(out / "input.zct", sc.image)
    save_tensor(out / "seg.zct", sc.seg)
    (out / "boxes.txt").write_text("".join(f"{c} {b.to_text()}" for c, b in sc.boxes))
    meta = {"scenario": name, "seed": seed, "target_class": sc.target_class}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    names = ["model.json", "model.weights", "input.zct", "seg.zct", "boxes.txt", "meta.json"]
    return [out / n for n in names]
