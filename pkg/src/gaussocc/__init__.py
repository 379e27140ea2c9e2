"""Semantic occupancy prediction with 3D Gaussians."""

from ._validation import NumericalError, ValidationError
from .gaussians import (
    CLASS_NAMES,
    NUM_CLASSES,
    GaussianAnchor,
    GaussianSet,
    RawGaussians,
    SceneBox,
    activate,
    covariance,
    quaternion_to_matrix,
)
from .splat import OccupancyGrid, SemanticField, field_to_grid, splat_backward, splat_forward
from .objectives import focal_loss, iou_miou, lovasz_softmax, scene_class_affinity
from .fit import GaussianFitter, fit_gaussians
from .refine import EncoderWeights, encode, encode_round
from .fusion import GlobalState, evaluate_global, update_global
from .pipeline import PredictConfig, explore, predict_local
from .worldgen import SceneSpec, generate_scene, render_feature_pyramid, trajectory

__version__ = "0.1.0"
