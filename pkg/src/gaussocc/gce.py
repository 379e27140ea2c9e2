"""Geometry-aware cross-encoding of Gaussian queries against image features.

Per Gaussian: ellipsoidal reference points are projected into a feature
pyramid and bilinearly sampled (``deformable_sample``), the samples are mixed
along channels with per-Gaussian weights predicted from the query
(``semantic_mix``), then along the point axis with weights predicted from the
Gaussian's shape (``geometric_mix``).  The point-averaged result updates the
query residually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_finite
from .camera import project
from .gaussians import GaussianSet, quaternion_to_matrix

LN_EPS = 1e-5
# below this variance a LayerNorm input is treated as constant
LN_VAR_FLOOR = 1e-12
GEOMETRY_FEATURES = 12
CHUNK = 256


@dataclass
class FeaturePyramid:
    """Multi-scale image features; ``levels[l]`` is ``(H_l, W_l, C)`` at ``strides[l]``."""

    levels: list
    strides: list

    def __post_init__(self):
        self.levels = [np.asarray(m, dtype=np.float64) for m in self.levels]
        self.strides = [int(s) for s in self.strides]
        if len(self.levels) != len(self.strides) or not self.levels:
            raise ValidationError("pyramid needs one stride per level")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValidationError("pyramid strides must be strictly increasing")
        if len({m.shape[-1] for m in self.levels}) != 1:
            raise ValidationError("all pyramid levels must share the channel count")
        for m in self.levels:
            check_finite(m, "feature pyramid")

    @property
    def channels(self):
        return self.levels[0].shape[-1]

    @property
    def num_levels(self):
        return len(self.levels)


@dataclass(frozen=True)
class OffsetTemplate:
    """Reference offsets in the Gaussian's local frame, each of norm <= 1."""

    base_offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.base_offsets, dtype=np.float64).reshape(-1, 3)
        if np.any(np.linalg.norm(off, axis=1) > 1 + 1e-12):
            raise ValidationError("base offsets must have norm <= 1")
        object.__setattr__(self, "base_offsets", off)

    @property
    def count(self):
        return self.base_offsets.shape[0]

    @classmethod
    def axes(cls, include_center=True):
        """The six principal-axis points at one sigma, optionally with the center first."""
        pts = np.concatenate([np.eye(3), -np.eye(3)])
        if include_center:
            pts = np.vstack([np.zeros(3), pts])
        return cls(pts)


@dataclass
class MixWeights:
    """Linear maps producing dynamic mixing weights, plus LayerNorm affine terms."""

    semantic_w: np.ndarray  # (C, C*C)
    semantic_b: np.ndarray  # (C*C,)
    geometric_w: np.ndarray  # (12, R*R)
    geometric_b: np.ndarray  # (R*R,)
    attention_w: np.ndarray  # (C, R*L)
    attention_b: np.ndarray  # (R*L,)
    ln_s_gain: np.ndarray
    ln_s_bias: np.ndarray
    ln_g_gain: np.ndarray
    ln_g_bias: np.ndarray

    NAMES = {
        "semantic_w": "semantic_proj.weight",
        "semantic_b": "semantic_proj.bias",
        "geometric_w": "geometric_proj.weight",
        "geometric_b": "geometric_proj.bias",
        "attention_w": "attention_proj.weight",
        "attention_b": "attention_proj.bias",
        "ln_s_gain": "ln_semantic.gain",
        "ln_s_bias": "ln_semantic.bias",
        "ln_g_gain": "ln_geometric.gain",
        "ln_g_bias": "ln_geometric.bias",
    }

    @property
    def channels(self):
        return self.semantic_w.shape[0]

    @property
    def num_points(self):
        return int(round(np.sqrt(self.geometric_w.shape[1])))

    @classmethod
    def init(cls, c_feat, num_points, num_levels, rng=None, scale=0.02):
        """Random weights (``rng`` given) or all-zero weights with unit LayerNorm gains."""

        def draw(*shape):
            return np.zeros(shape) if rng is None else rng.normal(0.0, scale, size=shape)

        return cls(
            draw(c_feat, c_feat * c_feat),
            draw(c_feat * c_feat),
            draw(GEOMETRY_FEATURES, num_points * num_points),
            draw(num_points * num_points),
            draw(c_feat, num_points * num_levels),
            draw(num_points * num_levels),
            np.ones(c_feat),
            np.zeros(c_feat),
            np.ones(c_feat),
            np.zeros(c_feat),
        )

    def to_tensors(self, prefix="gce."):
        return {prefix + name: getattr(self, attr) for attr, name in self.NAMES.items()}

    @classmethod
    def from_tensors(cls, tensors, prefix="gce."):
        try:
            return cls(**{attr: np.asarray(tensors[prefix + name], dtype=np.float64) for attr, name in cls.NAMES.items()})
        except KeyError as exc:
            raise ValidationError(f"missing weight tensor {exc.args[0]}") from None


def reference_points(anchors, tmpl):
    """World-space reference points ``m + R (offset * s)``: ``(N, R, 3)``, or ``(R, 3)`` for one anchor."""
    if isinstance(anchors, GaussianSet):
        R = quaternion_to_matrix(anchors.rotations)
        local = tmpl.base_offsets[None, :, :] * anchors.scales[:, None, :]
        return anchors.means[:, None, :] + np.einsum("nij,nrj->nri", R, local)
    R = quaternion_to_matrix(anchors.rotation)
    return np.asarray(anchors.mean) + (tmpl.base_offsets * anchors.scale) @ R.T


def bilinear(fmap, x, y):
    """Sample ``fmap`` ``(h, w, C)`` at continuous index coordinates with border clamping."""
    h, w = fmap.shape[:2]
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    return (
        fmap[y0, x0] * (1 - fx) * (1 - fy)
        + fmap[y0, x1] * fx * (1 - fy)
        + fmap[y1, x0] * (1 - fx) * fy
        + fmap[y1, x1] * fx * fy
    )


def level_coordinates(pixels, stride):
    """Map level-0 pixel coordinates to index coordinates of a level with ``stride``."""
    return pixels[..., 0] / stride - 0.5, pixels[..., 1] / stride - 0.5


def deformable_sample(queries, pixels, valid, pyramid, weights):
    """Sampled point features ``(N, R, C)``.

    Each valid point samples every level bilinearly; levels are combined with a
    softmax over the query's attention logits for that point.  Invalid points
    yield zero rows.
    """
    queries = np.asarray(queries, dtype=np.float64)
    n, r = valid.shape
    nlev = pyramid.num_levels
    logits = (queries @ weights.attention_w + weights.attention_b).reshape(n, r, nlev)
    logits = logits - logits.max(axis=2, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=2, keepdims=True)
    out = np.zeros((n, r, pyramid.channels))
    if not valid.any():
        return out
    px = pixels[valid]
    a = attn[valid]
    acc = np.zeros((px.shape[0], pyramid.channels))
    for lvl, (fmap, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
        x, y = level_coordinates(px, stride)
        acc += a[:, lvl, None] * bilinear(fmap, x, y)
    out[valid] = acc
    return out


def layer_norm(x, gain, bias, eps=LN_EPS):
    """LayerNorm over the last axis; constant inputs map to ``bias``."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps) * gain + bias
    return np.where(var <= LN_VAR_FLOOR, np.broadcast_to(bias, x.shape), normed)


def relu(x):
    return np.maximum(x, 0.0)


def semantic_mix(sampled, queries, weights):
    """``ReLU(LN(Q_p @ W_s))`` with ``W_s`` (C x C) predicted per Gaussian from its query."""
    n, r, c = sampled.shape
    out = np.empty_like(sampled)
    for s in range(0, n, CHUNK):
        e = min(s + CHUNK, n)
        Ws = (queries[s:e] @ weights.semantic_w + weights.semantic_b).reshape(e - s, c, c)
        out[s:e] = np.matmul(sampled[s:e], Ws)
    return relu(layer_norm(out, weights.ln_s_gain, weights.ln_s_bias))


def geometry_vectors(anchors):
    """Scale (3) followed by the row-major rotation matrix (9)."""
    R = quaternion_to_matrix(anchors.rotations)
    return np.concatenate([anchors.scales, R.reshape(-1, 9)], axis=1)


def geometric_mix(sem, anchors, weights):
    """``ReLU(LN(W_g @ Q_s))`` with ``W_g`` (R x R) predicted from scale and rotation."""
    n, r, _ = sem.shape
    Wg = (geometry_vectors(anchors) @ weights.geometric_w + weights.geometric_b).reshape(n, r, r)
    return relu(layer_norm(np.matmul(Wg, sem), weights.ln_g_gain, weights.ln_g_bias))


def cross_encode(anchors, queries, cam, pyramid, tmpl, weights):
    """One cross-encoder pass; returns updated queries ``(N, C)``.

    Gaussians with no reference point inside the image keep their query.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape != (len(anchors), weights.channels):
        raise ValidationError(f"queries must be (N, {weights.channels}), got {queries.shape}")
    if pyramid.channels != weights.channels:
        raise ValidationError("pyramid channels must match the query width")
    if tmpl.count != weights.num_points:
        raise ValidationError("offset template size does not match the geometric weights")
    pts = reference_points(anchors, tmpl)
    pixels, valid = project(pts, cam)
    sampled = deformable_sample(queries, pixels, valid, pyramid, weights)
    mixed = geometric_mix(semantic_mix(sampled, queries, weights), anchors, weights)
    update = mixed.mean(axis=1)
    update[~valid.any(axis=1)] = 0.0
    return queries + update
