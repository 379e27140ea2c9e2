"""Opacity-guided self-encoding of Gaussian queries on a sparse voxel grid.

Gaussian means are voxelized into a sparse tensor whose cell features are the
mean of their Gaussians' queries.  Submanifold convolutions keep the occupied
coordinate set fixed, and the gated variant scales the 3x3x3 response by
``sigmoid(opacity_logit) + sigmoid(conv1x1)`` per channel.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_finite, check_positive
from .gaussians import sigmoid

log = logging.getLogger(__name__)

OFFSETS_3 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
OFFSETS_1 = np.zeros((1, 3), dtype=np.int64)


@dataclass
class SparseGaussianTensor:
    """Occupied cells of a sparse grid.

    ``coords`` are unique, lexicographically sorted cell indices; ``owner[g]``
    is the cell of Gaussian ``g``; ``gate_opacity`` is the largest opacity
    logit among a cell's Gaussians.
    """

    coords: np.ndarray
    feats: np.ndarray
    owner: np.ndarray
    gate_opacity: np.ndarray
    clamped: int = 0

    @property
    def num_cells(self):
        return self.coords.shape[0]

    @property
    def owners(self):
        """Gaussian indices per cell."""
        order = np.argsort(self.owner, kind="stable")
        splits = np.searchsorted(self.owner[order], np.arange(1, self.num_cells))
        return np.split(order, splits)

    def with_feats(self, feats):
        return SparseGaussianTensor(self.coords, feats, self.owner, self.gate_opacity, self.clamped)


@dataclass
class SparseConvLayer:
    """Submanifold convolution: ``weights[k]`` is the ``(C_in, C_out)`` matrix of offset ``k``."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[0] not in (1, 27):
            raise ValidationError("conv weights must be (1 or 27, C_in, C_out)")
        if self.bias.shape != (self.weights.shape[2],):
            raise ValidationError("conv bias must have C_out entries")
        if self.stride != 1:
            raise ValidationError("submanifold convolutions use stride 1; downsampling is done by pooling")
        check_finite(self.weights, "conv weights")
        check_finite(self.bias, "conv bias")

    @property
    def kernel_size(self):
        return 3 if self.weights.shape[0] == 27 else 1

    @property
    def offsets(self):
        return OFFSETS_3 if self.kernel_size == 3 else OFFSETS_1

    @classmethod
    def init(cls, kernel_size, c_in, c_out, rng=None, scale=0.02):
        k = 27 if kernel_size == 3 else 1
        if rng is None:
            return cls(np.zeros((k, c_in, c_out)), np.zeros(c_out))
        return cls(rng.normal(0.0, scale, size=(k, c_in, c_out)), np.zeros(c_out))

    @classmethod
    def identity(cls, kernel_size, channels):
        layer = cls.init(kernel_size, channels, channels)
        center = 13 if kernel_size == 3 else 0
        layer.weights[center] = np.eye(channels)
        return layer

    def to_tensors(self, prefix):
        out = {f"{prefix}.offset_{i}.weight": w for i, w in enumerate(self.weights)}
        out[f"{prefix}.bias"] = self.bias
        return out

    @classmethod
    def from_tensors(cls, tensors, prefix, kernel_size):
        k = 27 if kernel_size == 3 else 1
        try:
            w = np.stack([np.asarray(tensors[f"{prefix}.offset_{i}.weight"]) for i in range(k)])
            return cls(w, np.asarray(tensors[f"{prefix}.bias"]))
        except KeyError as exc:
            raise ValidationError(f"missing weight tensor {exc.args[0]}") from None


def _cell_keys(coords, lo, span):
    c = coords - lo
    return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]


def voxelize_queries(means, queries, opacity_logits, se_voxel_size, box):
    """Build the sparse tensor of Gaussian means at cell size ``se_voxel_size``.

    Means outside ``box`` are clamped to the boundary cell; the number of
    clamped Gaussians is logged and stored on the result.
    """
    check_positive(se_voxel_size, "se_voxel_size")
    means = np.asarray(means, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    opacity_logits = np.asarray(opacity_logits, dtype=np.float64)
    n = means.shape[0]
    if queries.shape[0] != n or opacity_logits.shape != (n,):
        raise ValidationError("means, queries and opacities must describe the same Gaussians")
    grid_dims = np.ceil(np.asarray(box.extent) / se_voxel_size - 1e-9).astype(np.int64)
    cells = np.floor((means - np.asarray(box.origin)) / se_voxel_size).astype(np.int64)
    clipped = np.clip(cells, 0, grid_dims - 1)
    clamped = int(np.count_nonzero(np.any(clipped != cells, axis=1)))
    if clamped:
        log.warning("%d Gaussian means fell outside the box and were clamped", clamped)
    coords, owner = np.unique(clipped, axis=0, return_inverse=True)
    owner = owner.reshape(-1)
    m = coords.shape[0]
    counts = np.bincount(owner, minlength=m).astype(np.float64)
    feats = np.zeros((m, queries.shape[1]))
    np.add.at(feats, owner, queries)
    feats /= counts[:, None]
    gate = np.full(m, -np.inf)
    np.maximum.at(gate, owner, opacity_logits)
    return SparseGaussianTensor(coords, feats, owner, gate, clamped)


def neighbor_map(coords, offsets):
    """``(len(offsets), M)`` index of each cell's neighbor at each offset, ``-1`` if unoccupied."""
    m = coords.shape[0]
    if m == 0:
        return np.zeros((len(offsets), 0), dtype=np.int64)
    lo = coords.min(axis=0) - 1
    span = coords.max(axis=0) - lo + 2
    keys = _cell_keys(coords, lo, span)
    order = np.argsort(keys)
    sorted_keys = keys[order]
    out = np.full((len(offsets), m), -1, dtype=np.int64)
    for k, off in enumerate(offsets):
        q = _cell_keys(coords + off, lo, span)
        pos = np.searchsorted(sorted_keys, q)
        pos = np.minimum(pos, m - 1)
        hit = sorted_keys[pos] == q
        out[k, hit] = order[pos[hit]]
    return out


def submanifold_conv(t, layer, nbrs=None):
    """Convolve over occupied neighbors only; output coordinates equal input coordinates."""
    if layer.weights.shape[1] != t.feats.shape[1]:
        raise ValidationError(f"conv expects {layer.weights.shape[1]} input channels, got {t.feats.shape[1]}")
    if nbrs is None or nbrs.shape[0] != len(layer.offsets):
        nbrs = neighbor_map(t.coords, layer.offsets)
    out = np.broadcast_to(layer.bias, (t.num_cells, layer.bias.shape[0])).copy()
    for k in range(len(layer.offsets)):
        idx = nbrs[k]
        hit = idx >= 0
        if hit.any():
            out[hit] += t.feats[idx[hit]] @ layer.weights[k]
    return t.with_feats(out)


def ogspconv(t, conv3, conv1, nbrs=None):
    """Opacity-gated sparse convolution.

    ``conv3(Q) * (sigmoid(o) + sigmoid(conv1(Q)))`` with ``o`` the cell's
    opacity logit broadcast over channels.
    """
    if conv3.kernel_size != 3 or conv1.kernel_size != 1:
        raise ValidationError("ogspconv needs a 3x3x3 and a 1x1x1 convolution")
    if conv1.weights.shape[2] != conv3.weights.shape[2]:
        raise ValidationError("gate width must match the conv3 output width")
    main = submanifold_conv(t, conv3, nbrs).feats
    gate = sigmoid(t.gate_opacity)[:, None] + sigmoid(submanifold_conv(t, conv1).feats)
    return t.with_feats(main * gate)


def pool(t, factor):
    """Mean-pool occupied cells by ``factor``; returns the coarse tensor and each fine cell's parent."""
    coarse, parent = np.unique(t.coords // factor, axis=0, return_inverse=True)
    parent = parent.reshape(-1)
    m = coarse.shape[0]
    feats = np.zeros((m, t.feats.shape[1]))
    np.add.at(feats, parent, t.feats)
    feats /= np.bincount(parent, minlength=m)[:, None]
    gate = np.full(m, -np.inf)
    np.maximum.at(gate, parent, t.gate_opacity)
    return SparseGaussianTensor(coarse, feats, parent, gate), parent


def multiscale_self_encode(t, layers, num_scales, queries):
    """Updated per-Gaussian queries ``q + cell_out[owner]``.

    ``layers[k]`` is the ``(conv3, conv1)`` pair of scale ``k``.  Scale ``k``
    mean-pools cells by ``2**k``, applies :func:`ogspconv`, and broadcasts the
    result back to the fine cells; the scale outputs are summed.
    """
    if num_scales < 1:
        raise ValidationError("num_scales must be >= 1")
    if len(layers) < num_scales:
        raise ValidationError(f"need {num_scales} layer pairs, got {len(layers)}")
    queries = np.asarray(queries, dtype=np.float64)
    cell_out = ogspconv(t, *layers[0]).feats
    for k in range(1, num_scales):
        coarse, parent = pool(t, 2**k)
        cell_out = cell_out + ogspconv(coarse, *layers[k]).feats[parent]
    return queries + cell_out[t.owner]


def self_encode(means, queries, opacity_logits, box, layers, num_scales=2, se_voxel_size=0.16):
    """Voxelize and run :func:`multiscale_self_encode` in one call."""
    t = voxelize_queries(means, queries, opacity_logits, se_voxel_size, box)
    return multiscale_self_encode(t, layers, num_scales, queries)
