"""Gaussian-to-voxel splatting.

Every voxel center ``x`` gathers ``o_i * exp(-0.5 d^T Sigma_i^-1 d) * softmax(c_i)``
from each Gaussian whose ``cutoff_sigma`` ellipsoid contains it, ``d = x - m_i``.
Closer and more opaque Gaussians therefore contribute more semantic mass.

The forward pass is a gather: a binning pass lists the candidate Gaussians of
every voxel (in Gaussian index order) from their rotated-ellipsoid bounding
boxes, then voxels are processed in parallel.  Each voxel sums its candidates
in a fixed order, so results do not depend on the thread count.  The backward
pass runs in parallel over Gaussians, each owning its own gradient slot.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from ._validation import ValidationError, check_finite, check_positive
from .gaussians import GaussianSet, SceneBox, quaternion_to_matrix, softmax

# Prefer OpenMP; the bundled TBB is often too old and only produces warnings.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

DEFAULT_CUTOFF = 3.0
MASS_FLOOR = 1e-6


@dataclass
class SemanticField:
    """Dense ``(X, Y, Z, C)`` array of accumulated semantic mass over ``box``."""

    box: SceneBox
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[:3] != self.box.dims:
            raise ValidationError(f"field shape {self.values.shape} does not match box dims {self.box.dims}")

    @property
    def num_classes(self):
        return self.values.shape[3]

    def total_mass(self):
        return self.values.sum(axis=3)


@dataclass
class OccupancyGrid:
    """Dense label volume; ``labels[x, y, z]`` is a class index, 0 meaning free."""

    box: SceneBox
    labels: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.box.dims:
            raise ValidationError(f"labels shape {self.labels.shape} does not match box dims {self.box.dims}")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float32)
            if self.confidence.shape != self.labels.shape:
                raise ValidationError("confidence must match labels shape")

    @property
    def dims(self):
        return self.box.dims

    def occupied(self):
        return self.labels != 0


@dataclass
class SplatGradients:
    """Gradients of a scalar loss with respect to each anchor field.

    The rotation gradient is projected onto the tangent space of the unit
    quaternion, i.e. it already accounts for quaternion normalization.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    semantics: np.ndarray


@contextlib.contextmanager
def num_threads(n):
    """Temporarily set the numba thread count (clamped to what numba was started with)."""
    if n is None:
        yield
        return
    previous = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(previous)


def _prepare(anchors, box, cutoff_sigma):
    check_positive(cutoff_sigma, "cutoff_sigma")
    check_finite(anchors.to_rows(), "gaussian anchors")
    R = quaternion_to_matrix(anchors.rotations / np.linalg.norm(anchors.rotations, axis=1, keepdims=True))
    cov_diag = np.einsum("nij,nj->ni", R**2, anchors.scales**2)
    half = cutoff_sigma * np.sqrt(cov_diag)
    origin = np.asarray(box.origin)
    dims = np.asarray(box.dims)
    v = box.voxel_size
    lo = np.ceil((anchors.means - half - origin) / v - 0.5).astype(np.int64)
    hi = np.floor((anchors.means + half - origin) / v - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, dims - 1)
    weights = anchors.opacities[:, None] * softmax(anchors.semantics, axis=1)
    return (
        np.ascontiguousarray(R),
        np.ascontiguousarray(1.0 / anchors.scales**2),
        lo,
        hi,
        np.ascontiguousarray(weights),
    )


@njit(cache=True)
def _bin_candidates(lo, hi, nx, ny, nz):
    n = lo.shape[0]
    counts = np.zeros(nx * ny * nz + 1, dtype=np.int64)
    for i in range(n):
        for x in range(lo[i, 0], hi[i, 0] + 1):
            for y in range(lo[i, 1], hi[i, 1] + 1):
                base = (x * ny + y) * nz
                for z in range(lo[i, 2], hi[i, 2] + 1):
                    counts[base + z + 1] += 1
    for k in range(1, counts.shape[0]):
        counts[k] += counts[k - 1]
    cursor = counts[:-1].copy()
    cand = np.empty(counts[-1], dtype=np.int32)
    for i in range(n):
        for x in range(lo[i, 0], hi[i, 0] + 1):
            for y in range(lo[i, 1], hi[i, 1] + 1):
                base = (x * ny + y) * nz
                for z in range(lo[i, 2], hi[i, 2] + 1):
                    cand[cursor[base + z]] = i
                    cursor[base + z] += 1
    return counts, cand


@njit(cache=True, fastmath=False)
def _mahalanobis(R, inv_s2, i, dx, dy, dz):
    u0 = R[i, 0, 0] * dx + R[i, 1, 0] * dy + R[i, 2, 0] * dz
    u1 = R[i, 0, 1] * dx + R[i, 1, 1] * dy + R[i, 2, 1] * dz
    u2 = R[i, 0, 2] * dx + R[i, 1, 2] * dy + R[i, 2, 2] * dz
    return u0 * u0 * inv_s2[i, 0] + u1 * u1 * inv_s2[i, 1] + u2 * u2 * inv_s2[i, 2]


@njit(parallel=True, cache=True)
def _gather_forward(offsets, cand, means, R, inv_s2, weights, origin, vsize, nx, ny, nz, cut2, out):
    ncls = weights.shape[1]
    for x in prange(nx):
        cx = origin[0] + (x + 0.5) * vsize
        for y in range(ny):
            cy = origin[1] + (y + 0.5) * vsize
            for z in range(nz):
                cz = origin[2] + (z + 0.5) * vsize
                flat = (x * ny + y) * nz + z
                for k in range(offsets[flat], offsets[flat + 1]):
                    i = cand[k]
                    q = _mahalanobis(R, inv_s2, i, cx - means[i, 0], cy - means[i, 1], cz - means[i, 2])
                    if q <= cut2:
                        g = np.exp(-0.5 * q)
                        for c in range(ncls):
                            out[x, y, z, c] += g * weights[i, c]


@njit(parallel=True, cache=True)
def _scatter_backward(lo, hi, means, R, inv_s2, weights, origin, vsize, cut2, upstream, g_mean, g_s, g_R, g_w):
    n = means.shape[0]
    ncls = weights.shape[1]
    for i in prange(n):
        s0 = 1.0 / np.sqrt(inv_s2[i, 0])
        s1 = 1.0 / np.sqrt(inv_s2[i, 1])
        s2 = 1.0 / np.sqrt(inv_s2[i, 2])
        for x in range(lo[i, 0], hi[i, 0] + 1):
            dx = origin[0] + (x + 0.5) * vsize - means[i, 0]
            for y in range(lo[i, 1], hi[i, 1] + 1):
                dy = origin[1] + (y + 0.5) * vsize - means[i, 1]
                for z in range(lo[i, 2], hi[i, 2] + 1):
                    dz = origin[2] + (z + 0.5) * vsize - means[i, 2]
                    u0 = R[i, 0, 0] * dx + R[i, 1, 0] * dy + R[i, 2, 0] * dz
                    u1 = R[i, 0, 1] * dx + R[i, 1, 1] * dy + R[i, 2, 1] * dz
                    u2 = R[i, 0, 2] * dx + R[i, 1, 2] * dy + R[i, 2, 2] * dz
                    q = u0 * u0 * inv_s2[i, 0] + u1 * u1 * inv_s2[i, 1] + u2 * u2 * inv_s2[i, 2]
                    if q > cut2:
                        continue
                    g = np.exp(-0.5 * q)
                    gdotw = 0.0
                    for c in range(ncls):
                        up = upstream[x, y, z, c]
                        g_w[i, c] += g * up
                        gdotw += up * weights[i, c]
                    # dL/dq = -0.5 * g * sum_c up_c w_c
                    dq = -0.5 * g * gdotw
                    a0 = 2.0 * u0 * inv_s2[i, 0] * dq
                    a1 = 2.0 * u1 * inv_s2[i, 1] * dq
                    a2 = 2.0 * u2 * inv_s2[i, 2] * dq
                    # q depends on d through u = R^T d; d = x - m
                    g_mean[i, 0] -= R[i, 0, 0] * a0 + R[i, 0, 1] * a1 + R[i, 0, 2] * a2
                    g_mean[i, 1] -= R[i, 1, 0] * a0 + R[i, 1, 1] * a1 + R[i, 1, 2] * a2
                    g_mean[i, 2] -= R[i, 2, 0] * a0 + R[i, 2, 1] * a1 + R[i, 2, 2] * a2
                    g_s[i, 0] += -2.0 * u0 * u0 * inv_s2[i, 0] / s0 * dq
                    g_s[i, 1] += -2.0 * u1 * u1 * inv_s2[i, 1] / s1 * dq
                    g_s[i, 2] += -2.0 * u2 * u2 * inv_s2[i, 2] / s2 * dq
                    g_R[i, 0, 0] += dx * a0
                    g_R[i, 0, 1] += dx * a1
                    g_R[i, 0, 2] += dx * a2
                    g_R[i, 1, 0] += dy * a0
                    g_R[i, 1, 1] += dy * a1
                    g_R[i, 1, 2] += dy * a2
                    g_R[i, 2, 0] += dz * a0
                    g_R[i, 2, 1] += dz * a1
                    g_R[i, 2, 2] += dz * a2


def splat_forward(anchors, box, cutoff_sigma=DEFAULT_CUTOFF, threads=None):
    """Accumulate the semantic field of ``anchors`` over the voxels of ``box``."""
    if len(anchors) == 0:
        return SemanticField(box, np.zeros(box.dims + (anchors.num_classes,)))
    R, inv_s2, lo, hi, weights = _prepare(anchors, box, cutoff_sigma)
    nx, ny, nz = box.dims
    out = np.zeros((nx, ny, nz, weights.shape[1]))
    with num_threads(threads):
        offsets, cand = _bin_candidates(lo, hi, nx, ny, nz)
        _gather_forward(
            offsets, cand, np.ascontiguousarray(anchors.means), R, inv_s2, weights,
            np.asarray(box.origin), box.voxel_size, nx, ny, nz, cutoff_sigma**2, out,
        )
    return SemanticField(box, out)


def _rotation_matrix_grad_to_quaternion(q, gR):
    """Chain ``dL/dR`` through the quaternion-to-matrix map and normalization."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = gR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (
        y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
        + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
        - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
        + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1]
    )
    gq = np.stack([gw, gx, gy, gz], axis=1)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qhat = q / norm
    return (gq - qhat * np.sum(gq * qhat, axis=1, keepdims=True)) / norm


def splat_backward(anchors, box, upstream, cutoff_sigma=DEFAULT_CUTOFF, threads=None):
    """Gradients of ``sum(upstream * splat_forward(anchors).values)`` per anchor field.

    The hard cutoff is held fixed: voxels only contribute where the forward
    pass counted them.
    """
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    n = len(anchors)
    ncls = anchors.num_classes
    if upstream.shape != box.dims + (ncls,):
        raise ValidationError(f"upstream shape {upstream.shape} does not match field shape {box.dims + (ncls,)}")
    check_finite(upstream, "upstream gradient")
    if n == 0:
        z = np.zeros((0, 3))
        return SplatGradients(z, z.copy(), np.zeros((0, 4)), np.zeros(0), np.zeros((0, ncls)))
    R, inv_s2, lo, hi, weights = _prepare(anchors, box, cutoff_sigma)
    g_mean = np.zeros((n, 3))
    g_s = np.zeros((n, 3))
    g_R = np.zeros((n, 3, 3))
    g_w = np.zeros((n, ncls))
    with num_threads(threads):
        _scatter_backward(
            lo, hi, np.ascontiguousarray(anchors.means), R, inv_s2, weights,
            np.asarray(box.origin), box.voxel_size, cutoff_sigma**2, upstream, g_mean, g_s, g_R, g_w,
        )
    probs = softmax(anchors.semantics, axis=1)
    o = anchors.opacities
    # weights = o * softmax(c); g_w holds dL/dweights
    g_o = np.sum(g_w * probs, axis=1)
    g_p = g_w * o[:, None]
    g_c = probs * (g_p - np.sum(g_p * probs, axis=1, keepdims=True))
    g_q = _rotation_matrix_grad_to_quaternion(anchors.rotations, g_R)
    return SplatGradients(g_mean, g_s, g_q, g_o, g_c)


def splat_bruteforce(anchors, box, cutoff_sigma=DEFAULT_CUTOFF):
    """Reference splat over every Gaussian-voxel pair; ``cutoff_sigma=None`` disables the cutoff.

    Slow; intended for verification on small grids.
    """
    centers = box.voxel_centers().reshape(-1, 3)
    out = np.zeros((centers.shape[0], anchors.num_classes))
    for i in range(len(anchors)):
        a = anchors[i]
        R = quaternion_to_matrix(a.rotation / np.linalg.norm(a.rotation))
        sigma = R @ np.diag(a.scale**2) @ R.T
        d = centers - a.mean
        q = np.einsum("vi,ij,vj->v", d, np.linalg.inv(sigma), d)
        k = a.opacity * np.exp(-0.5 * q)
        if cutoff_sigma is not None:
            k = np.where(q <= cutoff_sigma**2, k, 0.0)
        out += k[:, None] * softmax(a.semantics)[None, :]
    return SemanticField(box, out.reshape(box.dims + (anchors.num_classes,)))


def field_to_grid(field, mass_floor=MASS_FLOOR):
    """Argmax labels; voxels whose total mass is below ``mass_floor`` are free."""
    total = field.total_mass()
    labels = np.argmax(field.values, axis=3).astype(np.uint8)
    labels[total < mass_floor] = 0
    return OccupancyGrid(field.box, labels, total.astype(np.float32))
