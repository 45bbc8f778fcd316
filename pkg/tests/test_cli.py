import json
import subprocess
import sys

import numpy as np
import pytest

from zoomcam.aggregation import normalize_minmax, upsample_bilinear
from zoomcam.cli import main
from zoomcam.fixtures import build_scenario, fixture_gen
from zoomcam.graph import forward
from zoomcam.io import load_model, load_tensor, save_tensor
from zoomcam.labeling import BBox
from zoomcam.pipeline import explain, localize
from zoomcam.saliency import last_conv_layer, zoom_cam_layer


@pytest.fixture
def small(tmp_path):
    fixture_gen("small-object", 0, tmp_path / "fx")
    return tmp_path / "fx"


def run(*args):
    return main([str(a) for a in args])


def test_visualize_then_bbox_matches_library(small, tmp_path):
    assert run("visualize", "--model", small / "model.json", "--image", small / "input.zct",
               "--class", 0, "--out", tmp_path / "map.zct") == 0
    assert run("bbox", "--map", tmp_path / "map.zct", "--out", tmp_path / "box.txt") == 0
    sc = build_scenario("small-object", 0)
    expected = localize(explain(sc.model, sc.image, 0), 0.25, 8)
    assert (tmp_path / "box.txt").read_text() == expected.to_text()
    smap = load_tensor(tmp_path / "map.zct")
    assert smap.shape == (64, 64) and smap.max() == 1.0 and smap.min() >= 0.0


def test_last_layer_visualize_is_upsampled_single_layer_map(small, tmp_path):
    assert run("visualize", "--model", small / "model.json", "--image", small / "input.zct", "--class", 0,
               "--method", "zoomcam", "--layers", "lastK=1", "--out", tmp_path / "last.zct") == 0
    model = load_model(small / "model.json")
    x = load_tensor(small / "input.zct")
    _, tape = forward(model, x)
    single = zoom_cam_layer(model, tape, 0, last_conv_layer(model))
    expected = upsample_bilinear(normalize_minmax(single), 64, 64).values
    np.testing.assert_array_equal(load_tensor(tmp_path / "last.zct"), expected.astype(np.float32))


def test_bbox_on_zero_map_fails(tmp_path, capsys):
    save_tensor(tmp_path / "zero.zct", np.zeros((4, 4)))
    assert run("bbox", "--map", tmp_path / "zero.zct", "--out", tmp_path / "box.txt") == 2
    assert "no foreground" in capsys.readouterr().err
    assert not (tmp_path / "box.txt").exists()


def test_bbox_connectivity_flag(tmp_path):
    m = np.zeros((4, 4))
    m[0, 0] = m[1, 1] = 1.0
    m[3, 3] = 0.9
    save_tensor(tmp_path / "m.zct", m)
    assert run("bbox", "--map", tmp_path / "m.zct", "--connectivity", 8, "--out", tmp_path / "b8.txt") == 0
    assert run("bbox", "--map", tmp_path / "m.zct", "--connectivity", 4, "--out", tmp_path / "b4.txt") == 0
    assert (tmp_path / "b8.txt").read_text() == "0 0 1 1\n"
    assert (tmp_path / "b4.txt").read_text() == "0 0 0 0\n"


def write_record(path, gt_class, gt_boxes, ranking, boxes):
    path.write_text(json.dumps({"gt_class": gt_class, "gt_boxes": gt_boxes, "ranking": ranking, "boxes": boxes}))


def test_eval_loc_two_records(tmp_path, capsys):
    rec = tmp_path / "rec"
    rec.mkdir()
    write_record(rec / "a.json", 0, [[0, 0, 9, 9]], [0, 1], {"0": [0, 0, 9, 5]})
    write_record(rec / "b.json", 1, [[0, 0, 9, 9]], [1, 0], {"1": [0, 0, 9, 3]})
    assert run("eval-loc", "--records", rec, "--k", 1) == 0
    assert capsys.readouterr().out == "top1_loc_error 50.0\n"


def test_eval_seg(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    save_tensor(tmp_path / "p" / "x.zct", np.array([[1, 0], [0, 0]]))
    save_tensor(tmp_path / "g" / "x.zct", np.array([[1, 1], [0, 0]]))
    assert run("eval-seg", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--classes", 1) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == f"class0_iou {2 / 3!r}"
    assert lines[1] == "class1_iou 0.5"
    assert lines[2].startswith("miou ") and float(lines[2].split()[1]) == pytest.approx(7 / 12)


def test_pseudo_seg_labels(tmp_path):
    fixture_gen("two-instance", 0, tmp_path / "fx")
    fx = tmp_path / "fx"
    assert run("pseudo-seg", "--model", fx / "model.json", "--image", fx / "input.zct", "--classes", "0,1",
               "--out", tmp_path / "seg.zct") == 0
    seg = load_tensor(tmp_path / "seg.zct")
    assert seg.shape == (64, 64)
    assert set(np.unique(seg).tolist()) <= {0.0, 1.0, 2.0}
    # each instance's center gets its own class
    sc = build_scenario("two-instance", 0)
    for cls, box in sc.boxes:
        cy, cx = (box.y_min + box.y_max) // 2, (box.x_min + box.x_max) // 2
        assert seg[cy, cx] == cls + 1


def test_gradcheck(tmp_path, capsys):
    fixture_gen("gap-head", 0, tmp_path)
    capsys.readouterr()
    assert run("gradcheck", "--model", tmp_path / "model.json", "--seed", 3) == 0
    out = capsys.readouterr().out
    assert out.startswith("max_rel_error ")
    assert float(out.split()[1]) <= 1e-5


def test_usage_errors_exit_1(small, tmp_path, capsys):
    assert run("visualize", "--model", small / "model.json") == 1
    assert run("nope") == 1
    assert run("visualize", "--model", small / "model.json", "--image", small / "input.zct", "--class", 0,
               "--layers", "bogus", "--out", tmp_path / "m.zct") == 1
    assert run("visualize", "--model", small / "model.json", "--image", small / "input.zct", "--class", 0,
               "--method", "cam", "--layers", "all", "--out", tmp_path / "m.zct") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("error: ") for line in err)


def test_data_errors_exit_2(small, tmp_path, capsys):
    (tmp_path / "bad.zct").write_bytes(b"XXXX" + bytes(12))
    assert run("bbox", "--map", tmp_path / "bad.zct", "--out", tmp_path / "b.txt") == 2
    assert "not a ZCT1 tensor" in capsys.readouterr().err
    assert run("visualize", "--model", tmp_path / "missing.json", "--image", small / "input.zct",
               "--class", 0, "--out", tmp_path / "m.zct") == 2
    assert run("visualize", "--model", small / "model.json", "--image", small / "input.zct",
               "--class", 9, "--out", tmp_path / "m.zct") == 2
    assert run("visualize", "--model", small / "model.json", "--image", small / "input.zct", "--class", 0,
               "--layers", "names=nope", "--out", tmp_path / "m.zct") == 2
    assert run("eval-loc", "--records", tmp_path) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "zoomcam.cli", "fixture-gen", "--scenario", "gap-head", "--seed", "2",
         "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "model.json").exists()
    proc = subprocess.run([sys.executable, "-m", "zoomcam.cli", "bbox"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert len(proc.stderr.strip().splitlines()) == 1


def test_box_file_parses(small, tmp_path):
    run("visualize", "--model", small / "model.json", "--image", small / "input.zct", "--class", 0,
        "--out", tmp_path / "map.zct")
    run("bbox", "--map", tmp_path / "map.zct", "--tau", 0.5, "--out", tmp_path / "box.txt")
    BBox.from_text((tmp_path / "box.txt").read_text())
