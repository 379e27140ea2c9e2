import json

import numpy as np
import pytest

from gaussocc.cli import main, parse_args
from gaussocc.formats import read_grid, read_gaussians, write_grid
from gaussocc.gaussians import SceneBox
from gaussocc.splat import OccupancyGrid

SMALL = ["--gaussians", "64", "--smax", "0.16", "--c-feat", "16", "--levels", "2", "--local-dims", "24x24x18"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["gen", "--seed", "7", "--out", str(d), "--dims", "24x24x18", "--frames", "3"]) == 0
    return d


def test_gen_outputs(scene, tmp_path):
    g = read_grid(scene / "scene.occg")
    assert g.dims == (24, 24, 18)
    assert len(json.loads((scene / "trajectory.json").read_text())) == 3
    assert json.loads((scene / "spec.json").read_text())["seed"] == 7
    assert main(["gen", "--seed", "7", "--out", str(tmp_path), "--dims", "24x24x18", "--frames", "3"]) == 0
    for name in ("scene.occg", "spec.json", "trajectory.json"):
        assert (tmp_path / name).read_bytes() == (scene / name).read_bytes()


def test_gen_defaults_follow_reference_setup():
    args = parse_args(["gen", "--out", "x"])
    assert args.dims == (60, 60, 36) and args.frames == 30 and args.voxel_size == 0.08
    args = parse_args(["fit", "--gt", "a", "--out", "b"])
    assert args.gaussians == 16200 and args.smax == 0.08


@pytest.mark.parametrize("argv", [
    ["fit", "--gt", "a", "--out", "b", "--gaussians", "0"],
    ["gen", "--out", "x", "--dims", "60x60"],
    ["predict", "--scene", "s", "--out", "o"],
    ["explore", "--scene", "s", "--out", "o", "--strategy", "average"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_predict_zero_weights_and_outputs(scene, tmp_path, capsys):
    assert main(["predict", "--scene", str(scene), "--frame", "1", "--out", str(tmp_path), "--weights", "zero"] + SMALL) == 0
    anchors, s_max, box = read_gaussians(tmp_path / "gaussians.json")
    assert len(anchors) == 64 and s_max == 0.16 and box.dims == (24, 24, 18)
    assert read_grid(tmp_path / "pred.occg").confidence is not None
    assert "local_to_world" in json.loads((tmp_path / "local_frame.json").read_text())
    out = capsys.readouterr().out
    assert out.startswith("iou,,") and "miou,," in out


def test_predict_missing_frame_exits_3(scene, tmp_path):
    assert main(["predict", "--scene", str(scene), "--frame", "9", "--out", str(tmp_path)] + SMALL) == 3
    assert main(["predict", "--scene", str(tmp_path / "nope"), "--frame", "0", "--out", str(tmp_path)] + SMALL) == 3


def test_explore_outputs(scene, tmp_path):
    argv = ["explore", "--scene", str(scene), "--out", str(tmp_path), "--strategy", "confidence", "--frames", "2"]
    assert main(argv + SMALL) == 0
    meta = json.loads((tmp_path / "global.json").read_text())
    assert meta["frame_index"] == 2 and meta["strategy"] == "confidence"
    rows = (tmp_path / "frames.csv").read_text().splitlines()
    counts = [int(r.split(",")[1]) for r in rows[1:]]
    assert len(counts) == 2 and counts[0] <= counts[1] == meta["explored_voxels"]


def test_fit_and_eval(scene, tmp_path, capsys):
    out = tmp_path / "fit"
    assert main(["fit", "--gt", str(scene / "scene.occg"), "--out", str(out), "--gaussians", "64",
                 "--smax", "0.16", "--steps", "3", "--export-csv", str(tmp_path / "e.csv")]) == 0
    assert (out / "losses.csv").read_text().count("\n") == 4
    assert (tmp_path / "e.csv").read_text().startswith("x,y,z,label\n")
    capsys.readouterr()
    assert main(["eval", "--pred", str(scene / "scene.occg"), "--gt", str(scene / "scene.occg"),
                 "--out", str(tmp_path / "m.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "iou,,1.0" and out[1] == "miou,,1.0"


def test_eval_hand_grids_and_empty_mask(tmp_path, capsys):
    box = SceneBox.from_dims((2, 2, 2), 0.1)
    write_grid(tmp_path / "gt.occg", OccupancyGrid(box, np.array([1, 1, 0, 0, 2, 0, 0, 0]).reshape(2, 2, 2)))
    write_grid(tmp_path / "p.occg", OccupancyGrid(box, np.array([1, 0, 1, 0, 2, 2, 0, 0]).reshape(2, 2, 2)))
    write_grid(tmp_path / "m.occg", OccupancyGrid(box, np.zeros((2, 2, 2))))
    base = ["eval", "--pred", str(tmp_path / "p.occg"), "--gt", str(tmp_path / "gt.occg")]
    assert main(base) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == f"iou,,{2 / 5!r}" and out[1] == f"miou,,{(1 / 3 + 1 / 2) / 2!r}"
    assert main(base + ["--mask", str(tmp_path / "m.occg")]) == 0
    cap = capsys.readouterr()
    assert "iou,,nan" in cap.out and "valid,,0.0" in cap.out and "undefined" in cap.err
    write_grid(tmp_path / "big.occg", OccupancyGrid(SceneBox.from_dims((2, 2, 3), 0.1), np.zeros((2, 2, 3))))
    assert main(["eval", "--pred", str(tmp_path / "big.occg"), "--gt", str(tmp_path / "gt.occg")]) == 3


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gaussians": 512, "smax": 0.16, "steps": 10}))
    args = parse_args(["fit", "--gt", "a", "--out", "b", "--config", str(cfg), "--steps", "20"])
    assert (args.gaussians, args.smax, args.steps) == (512, 0.16, 20)
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        parse_args(["fit", "--gt", "a", "--out", "b", "--config", str(cfg)])
    cfg.write_text(json.dumps({"gaussians": 0}))
    with pytest.raises(SystemExit):
        parse_args(["fit", "--gt", "a", "--out", "b", "--config", str(cfg)])
