import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from zoomcam.graph import Conv2d, Flatten, GlobalAvgPool, Linear, ModelGraph, ReLU  # noqa: E402

# criterion lines collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_model(weight, input_shape):
    """Flatten + bias-free Linear head over an arbitrary input."""
    weight = np.asarray(weight, dtype=float)
    return ModelGraph(
        input_shape,
        [Flatten("flatten"), Linear("fc", weight.shape[1], weight.shape[0])],
        {"fc": {"weight": weight}},
    )


def probe_model(grad):
    """1x1 identity conv on a single-channel image followed by a linear
    readout, so the gradient of score 0 w.r.t. ``conv`` equals ``grad``."""
    grad = np.asarray(grad, dtype=float)
    h, w = grad.shape
    return ModelGraph(
        (1, h, w),
        [Conv2d("conv", 1, 1, 1, 1), Flatten("flatten"), Linear("fc", h * w, 1)],
        {"conv": {"weight": np.ones((1, 1, 1, 1))}, "fc": {"weight": grad.reshape(1, -1)}},
    )


def gap_model(rng, c_in=2, hw=(6, 6), c1=3, c2=3, classes=3, k=3):
    """conv -> relu -> conv -> relu -> GAP -> linear, bias-free."""
    return ModelGraph(
        (c_in, *hw),
        [
            Conv2d("conv1", c_in, c1, k, k, 1, 1, k // 2, k // 2),
            ReLU("relu1"),
            Conv2d("conv2", c1, c2, k, k, 1, 1, k // 2, k // 2),
            ReLU("relu2"),
            GlobalAvgPool("gap"),
            Linear("fc", c2, classes),
        ],
        {
            "conv1": {"weight": rng.normal(size=(c1, c_in, k, k))},
            "conv2": {"weight": rng.normal(size=(c2, c1, k, k))},
            "fc": {"weight": rng.normal(size=(classes, c2))},
        },
    )
