"""Command-line entry point.

Exit codes: 0 on success, 1 for usage errors, 2 for bad or unreadable data.
Every failure prints a single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregation import parse_layer_policy
from .evaluation import LocRecord, SegRecord, class_ious, miou, topk_localization_error
from .fixtures import SCENARIOS, fixture_gen
from .graph import grad_check
from .io import load_model, load_tensor, save_tensor
from .labeling import BBox, largest_component_bbox, threshold_relative
from .pipeline import METHODS, explain, pseudo_segment

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _image(model, path) -> np.ndarray:
    x = load_tensor(path)
    if x.shape == tuple(model.input_shape):
        x = x[None]
    if x.shape != (1, *model.input_shape):
        raise ValueError(f"image has shape {x.shape}, model expects {(1, *model.input_shape)}")
    return x


def _class_list(text: str) -> list[int]:
    try:
        classes = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"bad class list {text!r}") from None
    if not classes:
        raise UsageError("empty class list")
    return classes


def _layers(args):
    if args.layers is None:
        return "all"
    if args.method != "zoomcam":
        raise UsageError("--layers only applies to --method zoomcam")
    try:
        return parse_layer_policy(args.layers)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_visualize(args):
    model = load_model(args.model)
    layers = _layers(args)
    smap = explain(model, _image(model, args.image), args.class_idx, args.method, layers)
    save_tensor(args.out, smap.values)


def cmd_bbox(args):
    values = load_tensor(args.map)
    if values.ndim != 2:
        raise ValueError(f"map must be 2-D, got shape {values.shape}")
    box = largest_component_bbox(threshold_relative(values, args.tau), args.connectivity)
    Path(args.out).write_text(box.to_text())


def cmd_pseudo_seg(args):
    model = load_model(args.model)
    layers = _layers(args)
    labels = pseudo_segment(model, _image(model, args.image), _class_list(args.classes), args.tau, args.method, layers)
    save_tensor(args.out, labels)


def _box(v) -> BBox:
    if len(v) != 4:
        raise ValueError(f"box needs 4 coordinates, got {v!r}")
    return BBox(*(int(c) for c in v))


def read_loc_record(path) -> LocRecord:
    """One localization record per JSON file::

        {"gt_class": 3, "gt_boxes": [[x0, y0, x1, y1], ...],
         "ranking": [3, 1, ...], "boxes": {"3": [x0, y0, x1, y1], ...}}
    """
    try:
        doc = json.loads(Path(path).read_text())
        return LocRecord(
            int(doc["gt_class"]),
            [_box(b) for b in doc["gt_boxes"]],
            [int(c) for c in doc["ranking"]],
            {int(c): _box(b) for c, b in doc.get("boxes", {}).items()},
        )
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed record ({e})") from None


def cmd_eval_loc(args):
    files = sorted(Path(args.records).glob("*.json"))
    if not files:
        raise ValueError(f"no *.json records in {args.records}")
    err = topk_localization_error([read_loc_record(f) for f in files], args.k)
    print(f"top{args.k}_loc_error {err!r}")


def cmd_eval_seg(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_files = sorted(gt_dir.glob("*.zct"))
    if not gt_files:
        raise ValueError(f"no *.zct ground-truth maps in {gt_dir}")
    records = []
    for g in gt_files:
        p = pred_dir / g.name
        if not p.exists():
            raise ValueError(f"missing prediction {p}")
        records.append(SegRecord(load_tensor(p), load_tensor(g)))
    for c, v in enumerate(class_ious(records, args.classes)):
        print(f"class{c}_iou {float(v)!r}")
    print(f"miou {miou(records, args.classes)!r}")


def cmd_gradcheck(args):
    model = load_model(args.model)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(1, *model.input_shape))
    class_idx = args.class_idx if args.class_idx is not None else int(rng.integers(model.class_count))
    names = [args.layer] if args.layer else model.layer_names[:-1]
    worst = max(grad_check(model, x, class_idx, n, args.step) for n in names)
    print(f"max_rel_error {worst!r}")


def cmd_fixture_gen(args):
    for path in fixture_gen(args.scenario, args.seed, args.out):
        print(path)


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zoomcam", description="Multi-layer saliency maps, pseudo-labels and their evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("visualize", help="write the normalized saliency map at input resolution")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_idx", type=_nonneg_int, required=True)
    p.add_argument("--method", choices=METHODS, default="zoomcam")
    p.add_argument("--layers", help="all | lastK=<k> | names=a,b (zoomcam only; default all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("bbox", help="largest-component box of a thresholded map")
    p.add_argument("--map", required=True)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bbox)

    p = sub.add_parser("pseudo-seg", help="fuse class maps into a label map")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", required=True, help="comma-separated model class indices")
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--method", choices=METHODS, default="zoomcam")
    p.add_argument("--layers")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_seg)

    p = sub.add_parser("eval-loc", help="top-k localization error over JSON records")
    p.add_argument("--records", required=True)
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=cmd_eval_loc)

    p = sub.add_parser("eval-seg", help="per-class IoU and mIoU over label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=_nonneg_int, required=True, help="number of foreground classes")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("gradcheck", help="backward pass vs finite differences on a seeded input")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--layer")
    p.add_argument("--class", dest="class_idx", type=_nonneg_int)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fixture-gen", help="write a deterministic scenario")
    p.add_argument("--scenario", choices=SCENARIOS, required=True)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixture_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
