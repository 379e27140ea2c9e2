import struct

import numpy as np
import pytest

from gaussocc._validation import ValidationError
from gaussocc.formats import (
    decode_grid,
    encode_grid,
    gaussians_from_json,
    gaussians_to_json,
    read_grid,
    weights_from_json,
    weights_to_json,
    write_export_csv,
    write_grid,
    write_loss_csv,
    write_metrics_csv,
)
from gaussocc.gaussians import RawGaussians, SceneBox, activate
from gaussocc.objectives import iou_miou
from gaussocc.splat import OccupancyGrid


def test_occg_header_for_reference_volume():
    box = SceneBox.from_dims((60, 60, 36), 0.08)
    data = encode_grid(OccupancyGrid(box, np.zeros(box.dims, np.uint8)))
    magic, version, flags, X, Y, Z, vs, *origin = struct.unpack_from("<4sIIIIIf3f", data)
    assert (magic, version, flags, X, Y, Z) == (b"OCCG", 1, 0, 60, 60, 36)
    assert vs == np.float32(0.08) and origin == [0.0, 0.0, 0.0]
    assert len(data) == 40 + 60 * 60 * 36


@pytest.mark.parametrize("with_conf", [False, True])
def test_occg_round_trip(tmp_path, rng, with_conf):
    box = SceneBox.from_dims((5, 4, 3), 0.08, origin=(0.1, -2.4, 0.3))
    lab = rng.integers(0, 12, box.dims).astype(np.uint8)
    conf = rng.random(box.dims).astype(np.float32) if with_conf else None
    write_grid(tmp_path / "g.occg", OccupancyGrid(box, lab, conf))
    back = read_grid(tmp_path / "g.occg")
    np.testing.assert_array_equal(back.labels, lab)
    assert back.box.voxel_size == 0.08 and back.box.origin == (0.1, -2.4, 0.3)
    if with_conf:
        np.testing.assert_array_equal(back.confidence, conf)
    else:
        assert back.confidence is None
    # flat index is (x*Y + y)*Z + z
    raw = (tmp_path / "g.occg").read_bytes()
    assert raw[40 + (2 * 4 + 1) * 3 + 2] == lab[2, 1, 2]


def test_occg_rejects_corrupt_data():
    box = SceneBox.from_dims((2, 2, 2), 0.1)
    data = encode_grid(OccupancyGrid(box, np.zeros(box.dims, np.uint8)))
    with pytest.raises(ValidationError):
        decode_grid(b"XXXX" + data[4:])
    with pytest.raises(ValidationError):
        decode_grid(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(ValidationError):
        decode_grid(data[:-1])
    with pytest.raises(ValidationError):
        decode_grid(data[:10])


def test_gaussian_json_round_trip_is_exact(rng):
    box = SceneBox.from_dims((10, 10, 10), 0.08)
    a = activate(RawGaussians.random(20, rng), box, 0.12)
    text = gaussians_to_json(a, 0.12, box)
    back, s_max, box2 = gaussians_from_json(text)
    np.testing.assert_array_equal(back.to_rows(), a.to_rows())
    assert s_max == 0.12 and box2 == box
    assert gaussians_to_json(back, s_max, box2) == text
    with pytest.raises(ValidationError):
        gaussians_from_json(text.replace('"count": 20', '"count": 21'))


def test_weights_json_round_trip(rng):
    t = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4)}
    text = weights_to_json(t)
    back = weights_from_json(text)
    assert list(back) == ["a", "b"]
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])
    with pytest.raises(ValidationError):
        weights_from_json('{"a": {"shape": [3], "data": [1, 2]}}')


def test_csv_writers(tmp_path):
    box = SceneBox.from_dims((2, 1, 2), 0.1)
    g = OccupancyGrid(box, np.array([[[0, 3]], [[5, 0]]], np.uint8))
    write_export_csv(tmp_path / "e.csv", g)
    assert (tmp_path / "e.csv").read_text() == "x,y,z,label\n0,0,1,3\n1,0,0,5\n"
    write_metrics_csv(tmp_path / "m.csv", iou_miou(g, g))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "metric,class,value" and lines[1] == "iou,,1.0"
    assert "class_iou,wall,1.0" in lines and "class_iou,floor,nan" in lines
    write_loss_csv(tmp_path / "l.csv", np.array([[0, 1.5, 0.1, 0.2, 0.3, 0.9]]))
    text = (tmp_path / "l.csv").read_text().splitlines()
    assert text[0] == "step,loss,focal,lovasz,geo,sem"
    assert [float(x) for x in text[1].split(",")] == [0, 1.5, 0.1, 0.2, 0.3, 0.9]
