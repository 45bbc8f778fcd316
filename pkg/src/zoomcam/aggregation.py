"""Normalization, bilinear upsampling and max-fusion of per-layer maps."""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .graph import ModelGraph
from .saliency import SaliencyError, SaliencyMap, conv_block_outputs

LayerPolicy = Union[str, int, Sequence[str]]


def normalize_minmax(smap: SaliencyMap) -> SaliencyMap:
    """Rescale to [0, 1]; constant maps become all zeros."""
    v = smap.values
    lo, hi = v.min(), v.max()
    if hi > lo:
        out = (v - lo) / (hi - lo)
    else:
        out = np.zeros_like(v)
    return SaliencyMap(out, smap.class_idx, smap.layer_name, normalized=True)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(smap: SaliencyMap, out_h: int, out_w: int) -> SaliencyMap:
    """Bilinear resize to a larger (or equal) grid with half-pixel alignment."""
    h, w = smap.shape
    if out_h < h or out_w < w:
        raise SaliencyError(f"upsample_bilinear cannot downscale {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        values = smap.values.copy()
    else:
        values = _interp_matrix(h, out_h) @ smap.values @ _interp_matrix(w, out_w).T
        # rounding can produce -0.0 or a hair below zero around exact zeros
        values = np.clip(values, smap.values.min(), smap.values.max())
    return SaliencyMap(values, smap.class_idx, smap.layer_name, smap.normalized)


def aggregate(maps: Sequence[SaliencyMap], size: tuple[int, int] | None = None) -> SaliencyMap:
    """Normalize every map, upsample to a common grid and take the pixelwise max.

    The grid defaults to the largest height and width among the maps. Passing ``size`` (at least as
    large as every map) produces the fused map directly at e.g. input
    resolution.
    """
    if not maps:
        raise SaliencyError("aggregate needs at least one map")
    classes = {m.class_idx for m in maps}
    if len(classes) > 1:
        raise SaliencyError(f"aggregate got maps for several classes: {sorted(classes)}")
    if size is None:
        size = (max(m.height for m in maps), max(m.width for m in maps))
    out_h, out_w = size
    for m in maps:
        if m.height > out_h or m.width > out_w:
            raise SaliencyError(f"map {m.layer_name!r} ({m.height}x{m.width}) exceeds target grid {out_h}x{out_w}")
    fused = None
    for m in maps:
        up = upsample_bilinear(normalize_minmax(m), out_h, out_w).values
        fused = up if fused is None else np.maximum(fused, up)
    name = "+".join(m.layer_name for m in maps)
    return SaliencyMap(fused, maps[0].class_idx, name, normalized=True)


def parse_layer_policy(text: str) -> LayerPolicy:
    """Parse the command-line form: ``all``, ``lastK=<k>`` or ``names=a,b``."""
    if text == "all":
        return "all"
    if text.startswith("lastK="):
        try:
            return int(text[len("lastK="):])
        except ValueError:
            raise SaliencyError(f"bad layer policy {text!r}") from None
    if text.startswith("names="):
        names = [n for n in text[len("names="):].split(",") if n]
        if not names:
            raise SaliencyError("names= policy lists no layers")
        return names
    raise SaliencyError(f"bad layer policy {text!r} (expected all, lastK=<k> or names=a,b)")


def select_layers(model: ModelGraph, policy: LayerPolicy = "all") -> list[str]:
    """Conv-block outputs chosen by ``policy``, ordered shallow to deep.

    ``policy`` is ``"all"``, an integer k (the deepest k blocks) or an explicit
    list of layer names.
    """
    blocks = conv_block_outputs(model)
    if isinstance(policy, str):
        if policy != "all":
            raise SaliencyError(f"unknown layer policy {policy!r}")
        return blocks
    if isinstance(policy, (int, np.integer)):
        k = int(policy)
        if k < 1 or k > len(blocks):
            raise SaliencyError(f"lastK={k} but the model has {len(blocks)} conv layers")
        return blocks[-k:]
    names = list(policy)
    if not names:
        raise SaliencyError("explicit layer list is empty")
    for n in names:
        if n not in model.layer_names:
            raise SaliencyError(f"unknown layer {n!r}")
        if len(model.shapes[model.index(n)]) != 3:
            raise SaliencyError(f"layer {n!r} is not a spatial activation")
    return sorted(dict.fromkeys(names), key=model.index)
