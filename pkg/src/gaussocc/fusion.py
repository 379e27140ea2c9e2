"""Fold per-frame local predictions into a global occupancy grid.

Two strategies:

``splice``
    every voxel seen by the current frame takes the frame's label and mass.
``confidence``
    a voxel seen before keeps its label unless the frame's mass is strictly
    larger; first observations are always written.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import ValidationError, check_same_dims
from .camera import Z_FAR
from .formats import read_grid, write_grid
from .objectives import iou_miou
from .splat import MASS_FLOOR, OccupancyGrid, SemanticField, field_to_grid
from .worldgen import frustum_mask

STRATEGIES = ("splice", "confidence")


@dataclass
class GlobalState:
    grid: OccupancyGrid
    explored_mask: np.ndarray
    confidence: np.ndarray
    frame_index: int = 0
    strategy: str = "splice"

    @classmethod
    def empty(cls, box, strategy="splice"):
        if strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        dims = box.dims
        return cls(OccupancyGrid(box, np.zeros(dims, np.uint8)), np.zeros(dims, bool),
                   np.zeros(dims, np.float32), 0, strategy)

    @property
    def box(self):
        return self.grid.box

    @property
    def explored_count(self):
        return int(np.count_nonzero(self.explored_mask))


def resample_local_to_global(local_values, local_box, global_box, local_to_world=None):
    """Copy per-cell values from a local grid onto global cells.

    Each global voxel center is mapped into the local frame and takes the value
    of the local cell containing it.  Returns ``(values, covered)``; uncovered
    global cells hold zeros.
    """
    if not np.isclose(local_box.voxel_size, global_box.voxel_size, rtol=0, atol=1e-12):
        raise ValidationError(f"voxel sizes differ: {local_box.voxel_size} vs {global_box.voxel_size}")
    local_values = np.asarray(local_values)
    if local_values.shape[:3] != local_box.dims:
        raise ValidationError("local values do not match the local box dims")
    centers = global_box.voxel_centers()
    if local_to_world is not None:
        pose = np.asarray(local_to_world, dtype=np.float64)
        centers = (centers - pose[:3, 3]) @ pose[:3, :3]
    idx = np.floor((centers - np.asarray(local_box.origin)) / local_box.voxel_size).astype(np.int64)
    covered = np.all((idx >= 0) & (idx < np.asarray(local_box.dims)), axis=-1)
    out = np.zeros(global_box.dims + local_values.shape[3:], dtype=local_values.dtype)
    sel = idx[covered]
    out[covered] = local_values[sel[:, 0], sel[:, 1], sel[:, 2]]
    return out, covered


def frame_mask(cam, global_box, covered, z_far=Z_FAR):
    """Global voxels updated by a frame: inside the view frustum and covered by the local box."""
    return frustum_mask(cam, global_box, z_far=z_far) & covered


def update_global(state, local, local_box, cam, strategy=None, local_to_world=None, mass_floor=MASS_FLOOR):
    """Return the state after folding in one frame.

    ``local`` is a :class:`SemanticField` (converted with ``mass_floor``) or an
    :class:`OccupancyGrid` carrying confidence.  Voxels outside the frame mask
    are left bit-identical.
    """
    strategy = strategy or state.strategy
    if strategy not in STRATEGIES:
        raise ValidationError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if isinstance(local, SemanticField):
        local = field_to_grid(local, mass_floor)
    if local.confidence is None:
        raise ValidationError("local prediction needs per-voxel confidence")
    if local.box.dims != local_box.dims:
        raise ValidationError("local grid does not match the local box")
    labels, covered = resample_local_to_global(local.labels, local_box, state.box, local_to_world)
    conf, _ = resample_local_to_global(local.confidence, local_box, state.box, local_to_world)
    mask = frame_mask(cam, state.box, covered)
    if strategy == "splice":
        take = mask
    else:
        take = mask & (~state.explored_mask | (conf > state.confidence))
    new_labels = state.grid.labels.copy()
    new_conf = state.confidence.copy()
    new_labels[take] = labels[take]
    new_conf[take] = conf[take]
    return GlobalState(OccupancyGrid(state.box, new_labels, new_conf), state.explored_mask | mask,
                       new_conf, state.frame_index + 1, strategy)


def evaluate_global(state, gt):
    """Metrics of the global grid against ``gt`` over explored voxels only."""
    check_same_dims(state.grid, gt)
    return iou_miou(state.grid, gt, mask=state.explored_mask)


def save_state(state, directory, stem="global"):
    """Write ``<stem>.occg``, ``<stem>.json`` and the explored mask as ``<stem>_explored.occg``."""
    d = Path(directory)
    write_grid(d / f"{stem}.occg", OccupancyGrid(state.box, state.grid.labels, state.confidence))
    write_grid(d / f"{stem}_explored.occg", OccupancyGrid(state.box, state.explored_mask.astype(np.uint8)))
    meta = {"frame_index": state.frame_index, "strategy": state.strategy, "explored_voxels": state.explored_count}
    (d / f"{stem}.json").write_text(json.dumps(meta, indent=1))


def load_state(directory, stem="global"):
    d = Path(directory)
    grid = read_grid(d / f"{stem}.occg")
    explored = read_grid(d / f"{stem}_explored.occg").labels.astype(bool)
    meta = json.loads((d / f"{stem}.json").read_text())
    conf = grid.confidence if grid.confidence is not None else np.zeros(grid.dims, np.float32)
    if int(np.count_nonzero(explored)) != meta["explored_voxels"]:
        raise ValidationError("explored mask does not match the checkpoint sidecar")
    return GlobalState(grid, explored, conf, meta["frame_index"], meta["strategy"])
