"""Per-frame local prediction and trajectory-level exploration.

The local volume is a box in front of the camera: its frame has x along the
camera's horizontal viewing direction, z up, and origin below the camera at
floor height, so the box spans ``[0, X) x [-Y/2, Y/2) x [0, Z)`` voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_positive
from .camera import project
from .fit import FREE_MASS
from .fusion import GlobalState, evaluate_global, update_global
from .gaussians import NUM_CLASSES, RawGaussians, SceneBox, activate, logit
from .gce import OffsetTemplate, bilinear, level_coordinates
from .objectives import iou_miou
from .refine import DEFAULT_ROUNDS, DEFAULT_SCALES, SE_VOXEL_SIZE, EncoderContext, EncoderState, EncoderWeights, encode
from .splat import DEFAULT_CUTOFF, OccupancyGrid, field_to_grid, splat_forward
from .worldgen import frustum_mask, render_feature_pyramid

LOCAL_DIMS = (60, 60, 36)


@dataclass(frozen=True)
class PredictConfig:
    n_gaussians: int = 16200
    s_max: float = 0.08
    c_feat: int = 96
    levels: int = 3
    rounds: int = DEFAULT_ROUNDS
    num_scales: int = DEFAULT_SCALES
    se_voxel_size: float = SE_VOXEL_SIZE
    local_dims: tuple = LOCAL_DIMS
    cutoff_sigma: float = DEFAULT_CUTOFF
    mass_floor: float = FREE_MASS
    seed: int = 0

    def __post_init__(self):
        if int(self.n_gaussians) < 1:
            raise ValidationError("n_gaussians must be >= 1")
        check_positive(self.s_max, "s_max")
        if len(self.local_dims) != 3 or min(self.local_dims) < 1:
            raise ValidationError("local_dims must be three positive ints")


@dataclass
class LocalPrediction:
    box: SceneBox
    pose: np.ndarray  # local-to-world, 4x4
    cam: object  # camera with the local frame as its world
    initial: RawGaussians
    raw: RawGaussians
    anchors: object
    field: object
    grid: OccupancyGrid


def local_frame(cam, dims=LOCAL_DIMS, voxel_size=0.08, floor_z=0.0):
    """Local box and its local-to-world pose for a camera."""
    forward = cam.E[2, :3]
    horiz = np.hypot(forward[0], forward[1])
    if horiz < 1e-9:
        raise ValidationError("camera looks straight up or down; the local box is undefined")
    c, s = forward[0] / horiz, forward[1] / horiz
    pose = np.eye(4)
    pose[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    pos = cam.position
    pose[:3, 3] = [pos[0], pos[1], floor_z]
    box = SceneBox.from_dims(dims, voxel_size, origin=(0.0, -0.5 * dims[1] * voxel_size, 0.0))
    return box, pose


def local_ground_truth(gt, box, pose):
    """Ground-truth labels on the local grid plus the mask of local voxels inside the scene."""
    centers = box.voxel_centers() @ pose[:3, :3].T + pose[:3, 3]
    idx = np.floor((centers - np.asarray(gt.box.origin)) / gt.box.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(gt.dims)), axis=-1)
    labels = np.zeros(box.dims, np.uint8)
    sel = idx[inside]
    labels[inside] = gt.labels[sel[:, 0], sel[:, 1], sel[:, 2]]
    return OccupancyGrid(box, labels), inside


def initial_anchors(n, rng, num_classes=NUM_CLASSES):
    """Random anchors spread over the whole local box."""
    return RawGaussians(
        logit(rng.uniform(0.02, 0.98, size=(n, 3))),
        np.zeros((n, 3)),
        rng.normal(size=(n, 4)),
        np.zeros(n),
        rng.normal(size=(n, num_classes)),
    )


def initial_queries(means, cam, pyramid):
    """Pyramid features at each mean's projection, averaged over levels; zero when off-image."""
    pixels, valid = project(means, cam)
    q = np.zeros((len(means), pyramid.channels))
    if valid.any():
        px = pixels[valid]
        acc = np.zeros((px.shape[0], pyramid.channels))
        for fmap, stride in zip(pyramid.levels, pyramid.strides):
            acc += bilinear(fmap, *level_coordinates(px, stride))
        q[valid] = acc / pyramid.num_levels
    return q


def make_weights(spec, config, tmpl=None):
    """``"zero"``, ``"random"`` (seeded by ``config.seed``) or a tensor dict."""
    tmpl = tmpl or OffsetTemplate.axes()
    if isinstance(spec, EncoderWeights):
        return spec
    if isinstance(spec, dict):
        return EncoderWeights.from_tensors(spec)
    if spec in ("zero", "random"):
        rng = np.random.default_rng(config.seed) if spec == "random" else None
        return EncoderWeights.init(config.c_feat, tmpl.count, config.levels, rounds=config.rounds,
                                   num_scales=config.num_scales, rng=rng)
    raise ValidationError(f"unknown weights {spec!r}")


def predict_local(cam, pyramid, weights, config, frame_seed=0, floor_z=0.0, voxel_size=0.08, tmpl=None):
    """Local semantic occupancy for one posed frame."""
    tmpl = tmpl or OffsetTemplate.axes()
    if weights.channels != pyramid.channels:
        raise ValidationError(f"weights expect {weights.channels} channels, pyramid has {pyramid.channels}")
    box, pose = local_frame(cam, config.local_dims, voxel_size, floor_z)
    lcam = cam.compose(pose)
    rng = np.random.default_rng([config.seed, frame_seed])
    raw0 = initial_anchors(int(config.n_gaussians), rng)
    anchors0 = activate(raw0, box, config.s_max)
    state = EncoderState(raw0, initial_queries(anchors0.means, lcam, pyramid))
    ctx = EncoderContext(box, config.s_max, lcam, pyramid, tmpl, config.se_voxel_size)
    state = encode(state, weights, ctx)
    anchors = activate(state.raw, box, config.s_max)
    fld = splat_forward(anchors, box, config.cutoff_sigma)
    return LocalPrediction(box, pose, lcam, raw0, state.raw, anchors, fld, field_to_grid(fld, config.mass_floor))


def evaluate_local(pred, gt):
    """Frustum-masked metrics of a local prediction against the scene ground truth."""
    gt_local, inside = local_ground_truth(gt, pred.box, pred.pose)
    mask = frustum_mask(pred.cam, pred.box) & inside
    return iou_miou(pred.grid, gt_local, mask=mask)


def explore(gt, cams, weights, config, strategy="splice", callback=None):
    """Fold local predictions over a trajectory; returns the final :class:`GlobalState`."""
    state = GlobalState.empty(gt.box, strategy)
    for i, cam in enumerate(cams):
        pyramid, _ = render_feature_pyramid(gt, cam, levels=config.levels, c_feat=config.c_feat)
        pred = predict_local(cam, pyramid, weights, config, frame_seed=i, floor_z=gt.box.origin[2],
                             voxel_size=gt.box.voxel_size)
        state = update_global(state, pred.grid, pred.box, cam, strategy, local_to_world=pred.pose)
        if callback is not None:
            callback(i, state, evaluate_global(state, gt))
    return state
