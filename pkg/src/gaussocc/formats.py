"""File formats: OCCG grids, Gaussian and weight JSON, CSV tables.

OCCG layout (little-endian)::

    b"OCCG" | u32 version=1 | u32 flags | u32 X, Y, Z | f32 voxel_size | 3 x f32 origin
    X*Y*Z u8 labels, flat index (x*Y + y)*Z + z
    X*Y*Z f32 confidence, present when flags bit 0 is set
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .gaussians import NUM_CLASSES, GaussianSet, SceneBox
from .splat import OccupancyGrid

MAGIC = b"OCCG"
VERSION = 1
FLAG_CONFIDENCE = 1
_HEADER = struct.Struct("<4sIIIIIf3f")


def _f32(x):
    # shortest decimal that round-trips through float32, so 0.08 reads back as 0.08
    return float(str(np.float32(x)))


def encode_grid(grid):
    X, Y, Z = grid.dims
    flags = FLAG_CONFIDENCE if grid.confidence is not None else 0
    parts = [_HEADER.pack(MAGIC, VERSION, flags, X, Y, Z, grid.box.voxel_size, *grid.box.origin),
             np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes()]
    if grid.confidence is not None:
        parts.append(np.ascontiguousarray(grid.confidence, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_grid(data):
    if len(data) < _HEADER.size:
        raise ValidationError("truncated OCCG header")
    magic, version, flags, X, Y, Z, vs, ox, oy, oz = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValidationError("not an OCCG file")
    if version != VERSION:
        raise ValidationError(f"unsupported OCCG version {version}")
    n = X * Y * Z
    expected = _HEADER.size + n + (4 * n if flags & FLAG_CONFIDENCE else 0)
    if len(data) != expected:
        raise ValidationError(f"OCCG payload is {len(data)} bytes, expected {expected}")
    box = SceneBox.from_dims((X, Y, Z), _f32(vs), (_f32(ox), _f32(oy), _f32(oz)))
    off = _HEADER.size
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).reshape(X, Y, Z).copy()
    conf = None
    if flags & FLAG_CONFIDENCE:
        conf = np.frombuffer(data, dtype="<f4", count=n, offset=off + n).reshape(X, Y, Z).astype(np.float32)
    return OccupancyGrid(box, labels, conf)


def write_grid(path, grid):
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path):
    return decode_grid(Path(path).read_bytes())


def gaussians_to_json(anchors, s_max, box):
    doc = {"count": len(anchors), "s_max": float(s_max), "box": box.to_dict(),
           "anchors": anchors.to_rows().tolist()}
    return json.dumps(doc)


def gaussians_from_json(text, num_classes=NUM_CLASSES):
    doc = json.loads(text)
    rows = np.asarray(doc["anchors"], dtype=np.float64).reshape(-1, 11 + num_classes)
    if rows.shape[0] != doc["count"]:
        raise ValidationError("anchor count does not match the 'count' field")
    return GaussianSet.from_rows(rows, num_classes), doc["s_max"], SceneBox.from_dict(doc["box"])


def write_gaussians(path, anchors, s_max, box):
    Path(path).write_text(gaussians_to_json(anchors, s_max, box))


def read_gaussians(path):
    return gaussians_from_json(Path(path).read_text())


def weights_to_json(tensors):
    doc = {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
           for k, v in sorted(tensors.items())}
    return json.dumps(doc)


def weights_from_json(text):
    try:
        doc = json.loads(text)
        return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed weight file: {exc}") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics_csv(path, metrics):
    _write_csv(path, ("metric", "class", "value"), [(m, c, repr(float(v))) for m, c, v in metrics.rows()])


def write_loss_csv(path, curve):
    rows = [(int(r[0]),) + tuple(repr(float(x)) for x in r[1:]) for r in curve]
    _write_csv(path, ("step", "loss", "focal", "lovasz", "geo", "sem"), rows)


def write_export_csv(path, grid, occupied_only=True):
    """Dump ``x,y,z,label`` rows (occupied voxels only by default) for external plotting."""
    idx = np.argwhere(grid.labels != 0) if occupied_only else np.argwhere(np.ones(grid.dims, dtype=bool))
    labels = grid.labels[tuple(idx.T)]
    _write_csv(path, ("x", "y", "z", "label"), np.column_stack([idx, labels]).tolist())
