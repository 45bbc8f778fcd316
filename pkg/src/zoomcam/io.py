"""On-disk formats.

ZCT1 tensor file::

    b"ZCT1" | rank: u32 LE | dims: rank x u32 LE | data: prod(dims) x f32 LE

Model file: a JSON document with ``input_shape``, ``class_count``, ``layers``
and ``weights_file`` (resolved relative to the JSON file). The weights blob
is the concatenation of ZCT1 records, weight then bias, in layer order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .graph import LAYER_TYPES, GraphError, ModelGraph, param_shapes

MAGIC = b"ZCT1"


class FormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.ndim < 1:
        raise FormatError("tensor rank must be at least 1")
    data = np.ascontiguousarray(a, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise FormatError("tensor contains values that are non-finite in 32-bit float")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + data.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < 8:
        raise FormatError("truncated tensor header")
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("not a ZCT1 tensor")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank < 1:
        raise FormatError("tensor rank must be at least 1")
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise FormatError(f"truncated tensor payload: need {4 * count} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return data.astype(np.float64).reshape(dims), end


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def layer_to_dict(layer) -> dict:
    d = {"name": layer.name, "kind": layer.kind}
    d.update({k: v for k, v in asdict(layer).items() if k != "name"})
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise FormatError(f"unknown layer kind {kind!r}")
    allowed = {f.name for f in fields(cls)}
    extra = set(d) - allowed
    if extra:
        raise FormatError(f"layer {d.get('name')!r}: unexpected fields {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise FormatError(f"layer {d.get('name')!r}: {e}") from None


def save_model(model: ModelGraph, path, weights_file: str | None = None) -> None:
    path = Path(path)
    weights_file = weights_file or path.with_suffix(".weights").name
    doc = {
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [layer_to_dict(l) for l in model.layers],
        "weights_file": weights_file,
    }
    blob = bytearray()
    for layer in model.layers:
        for key in param_shapes(layer):
            blob += encode_tensor(model.params[layer.name][key])
    path.write_text(json.dumps(doc, indent=2) + "\n")
    (path.parent / weights_file).write_bytes(bytes(blob))


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    for key in ("input_shape", "class_count", "layers", "weights_file"):
        if key not in doc:
            raise FormatError(f"{path}: missing {key!r}")
    layers = [layer_from_dict(d) for d in doc["layers"]]
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise FormatError(f"duplicate layer names: {', '.join(dupes)}")
    buf = (path.parent / os.fspath(doc["weights_file"])).read_bytes()
    params, offset = {}, 0
    for layer in layers:
        for key, shape in param_shapes(layer).items():
            if offset >= len(buf):
                raise FormatError(f"weights blob ends before {layer.name!r}.{key}")
            arr, offset = decode_tensor(buf, offset)
            if arr.shape != shape:
                raise FormatError(f"layer {layer.name!r}: {key} has shape {arr.shape}, expected {shape}")
            params.setdefault(layer.name, {})[key] = arr
    if offset != len(buf):
        raise FormatError(f"weights blob has {len(buf) - offset} unused trailing bytes")
    try:
        return ModelGraph(doc["input_shape"], layers, params, doc["class_count"])
    except GraphError as e:
        raise FormatError(str(e)) from None
