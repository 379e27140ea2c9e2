"""Residual anchor refinement and the self -> cross -> refine encoder round."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_finite
from .gaussians import GEOMETRY_DIM, NUM_CLASSES, RawGaussians, activate
from .gce import MixWeights, OffsetTemplate, cross_encode, relu
from .ose import SparseConvLayer, self_encode

DEFAULT_ROUNDS = 3
DEFAULT_SCALES = 2
SE_VOXEL_SIZE = 0.16


@dataclass
class RefineHead:
    """Two-layer perceptron ``C -> C -> 11 + num_classes`` with a ReLU between."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
            check_finite(getattr(self, name), f"refine head {name}")
        c = self.w1.shape[0]
        if self.w1.shape != (c, c) or self.b1.shape != (c,) or self.w2.shape[0] != c or self.b2.shape != self.w2.shape[1:]:
            raise ValidationError("inconsistent refine head shapes")

    @property
    def out_dim(self):
        return self.w2.shape[1]

    @classmethod
    def init(cls, c_feat, num_classes=NUM_CLASSES, rng=None, scale=0.02):
        d = GEOMETRY_DIM + num_classes
        if rng is None:
            return cls(np.zeros((c_feat, c_feat)), np.zeros(c_feat), np.zeros((c_feat, d)), np.zeros(d))
        return cls(rng.normal(0.0, scale, (c_feat, c_feat)), np.zeros(c_feat), rng.normal(0.0, scale, (c_feat, d)), np.zeros(d))

    def __call__(self, queries):
        return relu(queries @ self.w1 + self.b1) @ self.w2 + self.b2

    def to_tensors(self, prefix):
        return {f"{prefix}.l1.weight": self.w1, f"{prefix}.l1.bias": self.b1,
                f"{prefix}.l2.weight": self.w2, f"{prefix}.l2.bias": self.b2}

    @classmethod
    def from_tensors(cls, tensors, prefix):
        try:
            return cls(*(tensors[f"{prefix}.{k}"] for k in ("l1.weight", "l1.bias", "l2.weight", "l2.bias")))
        except KeyError as exc:
            raise ValidationError(f"missing weight tensor {exc.args[0]}") from None


def refine_anchors(queries, raw, head):
    """``raw + head(queries)`` in unconstrained space; activation is re-applied by the caller."""
    if head.out_dim != GEOMETRY_DIM + raw.raw_semantics.shape[1]:
        raise ValidationError("refine head width does not match the anchor layout")
    return RawGaussians.from_vector(raw.to_vector() + head(np.asarray(queries, dtype=np.float64)))


@dataclass
class RoundWeights:
    ose: list  # (conv3, conv1) per scale
    gce: MixWeights
    head: RefineHead

    def to_tensors(self, prefix):
        out = {}
        for k, (c3, c1) in enumerate(self.ose):
            out.update(c3.to_tensors(f"{prefix}.ose.scale{k}.conv3"))
            out.update(c1.to_tensors(f"{prefix}.ose.scale{k}.conv1"))
        out.update(self.gce.to_tensors(f"{prefix}.gce."))
        out.update(self.head.to_tensors(f"{prefix}.refine.head"))
        return out

    @classmethod
    def from_tensors(cls, tensors, prefix, num_scales):
        ose = [
            (SparseConvLayer.from_tensors(tensors, f"{prefix}.ose.scale{k}.conv3", 3),
             SparseConvLayer.from_tensors(tensors, f"{prefix}.ose.scale{k}.conv1", 1))
            for k in range(num_scales)
        ]
        return cls(ose, MixWeights.from_tensors(tensors, f"{prefix}.gce."),
                   RefineHead.from_tensors(tensors, f"{prefix}.refine.head"))


@dataclass
class EncoderWeights:
    """Separate weights for each encoder round."""

    rounds: list

    @property
    def num_rounds(self):
        return len(self.rounds)

    @property
    def channels(self):
        return self.rounds[0].gce.channels

    @classmethod
    def init(cls, c_feat, num_points, num_levels, num_classes=NUM_CLASSES, rounds=DEFAULT_ROUNDS,
             num_scales=DEFAULT_SCALES, rng=None, scale=0.02):
        """All-zero weights (``rng=None``) or small Gaussian weights."""
        out = []
        for _ in range(rounds):
            ose = [(SparseConvLayer.init(3, c_feat, c_feat, rng, scale), SparseConvLayer.init(1, c_feat, c_feat, rng, scale))
                   for _ in range(num_scales)]
            out.append(RoundWeights(ose, MixWeights.init(c_feat, num_points, num_levels, rng, scale),
                                    RefineHead.init(c_feat, num_classes, rng, scale)))
        return cls(out)

    def to_tensors(self):
        out = {}
        for b, rw in enumerate(self.rounds):
            out.update(rw.to_tensors(f"round{b}"))
        return out

    @classmethod
    def from_tensors(cls, tensors):
        rounds = sorted({int(k.split(".")[0][5:]) for k in tensors if k.startswith("round")})
        if not rounds or rounds != list(range(len(rounds))):
            raise ValidationError("weights must contain rounds 0..B-1")
        num_scales = len({k.split(".")[2] for k in tensors if k.startswith("round0.ose.")})
        return cls([RoundWeights.from_tensors(tensors, f"round{b}", num_scales) for b in rounds])


@dataclass
class EncoderState:
    raw: RawGaussians
    queries: np.ndarray


@dataclass(frozen=True)
class EncoderContext:
    """Per-frame inputs shared by every round."""

    box: object
    s_max: float
    cam: object
    pyramid: object
    template: OffsetTemplate
    se_voxel_size: float = SE_VOXEL_SIZE


def encode_round(state, weights, round_index, ctx):
    """Self-encode, cross-encode, then refine the anchors residually."""
    if not 0 <= round_index < weights.num_rounds:
        raise ValidationError(f"round_index must be in [0, {weights.num_rounds})")
    rw = weights.rounds[round_index]
    anchors = activate(state.raw, ctx.box, ctx.s_max)
    q = self_encode(anchors.means, state.queries, state.raw.raw_opacities, ctx.box, rw.ose,
                    num_scales=len(rw.ose), se_voxel_size=ctx.se_voxel_size)
    q = cross_encode(anchors, q, ctx.cam, ctx.pyramid, ctx.template, rw.gce)
    return EncoderState(refine_anchors(q, state.raw, rw.head), q)


def encode(state, weights, ctx, rounds=None):
    """Run ``rounds`` (default: all) encoder rounds in order."""
    for b in range(weights.num_rounds if rounds is None else rounds):
        state = encode_round(state, weights, b, ctx)
    return state
