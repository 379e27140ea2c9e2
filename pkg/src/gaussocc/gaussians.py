"""Semantic 3D Gaussians: scene box, anchor sets and ellipsoid math.

Anchors are stored as struct-of-arrays (``GaussianSet``) because every consumer
(splatting, encoders, fitting) works on whole batches.  Quaternions are
scalar-first ``(w, x, y, z)`` with the Hamilton product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_finite

NUM_CLASSES = 12
CLASS_NAMES = (
    "free",
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furniture",
    "objects",
)
# mean(3) + scale(3) + rotation(4) + opacity(1)
GEOMETRY_DIM = 11


class DegenerateRotationError(ValidationError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class SceneBox:
    """Axis-aligned voxelized volume.

    ``dims`` is ``round(extent / voxel_size)`` per axis; extents must be within
    half a voxel of an integer multiple.
    """

    origin: tuple
    extent: tuple
    voxel_size: float

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        extent = tuple(float(v) for v in self.extent)
        if len(origin) != 3 or len(extent) != 3:
            raise ValidationError("origin and extent must be 3-vectors")
        if not np.all(np.isfinite(origin + extent)) or not np.isfinite(self.voxel_size):
            raise ValidationError("scene box must be finite")
        if self.voxel_size <= 0:
            raise ValidationError(f"voxel_size must be > 0, got {self.voxel_size}")
        if min(extent) <= 0:
            raise ValidationError(f"extent must be positive, got {extent}")
        ratio = np.asarray(extent) / self.voxel_size
        if np.any(np.abs(ratio - np.round(ratio)) > 0.5 - 1e-9) or np.any(np.round(ratio) < 1):
            raise ValidationError(f"extent {extent} is not a voxel multiple of {self.voxel_size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @classmethod
    def from_dims(cls, dims, voxel_size, origin=(0.0, 0.0, 0.0)):
        dims = tuple(int(d) for d in dims)
        return cls(origin, tuple(d * voxel_size for d in dims), voxel_size)

    @property
    def dims(self):
        return tuple(int(round(e / self.voxel_size)) for e in self.extent)

    @property
    def num_voxels(self):
        x, y, z = self.dims
        return x * y * z

    def voxel_centers(self):
        """Centers of all voxels as an ``(X, Y, Z, 3)`` array."""
        axes = [
            self.origin[a] + (np.arange(n) + 0.5) * self.voxel_size
            for a, n in enumerate(self.dims)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def center(self):
        return np.asarray(self.origin) + 0.5 * np.asarray(self.extent)

    def to_dict(self):
        return {"origin": list(self.origin), "extent": list(self.extent), "voxel_size": self.voxel_size}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["origin"]), tuple(d["extent"]), d["voxel_size"])


def quaternion_to_matrix(q):
    """Rotation matrices for unit quaternions ``(..., 4)`` -> ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quaternion(R):
    """Inverse of :func:`quaternion_to_matrix` for a single rotation (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


@dataclass(frozen=True)
class GaussianAnchor:
    """A single activated Gaussian."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    semantics: np.ndarray

    def covariance(self):
        return covariance(self)


@dataclass(frozen=True)
class GaussianSet:
    """A batch of activated Gaussians.

    Attributes
    ----------
    means, scales : (N, 3) arrays in meters
    rotations : (N, 4) unit quaternions, scalar first
    opacities : (N,) values in (0, 1)
    semantics : (N, C) unnormalized class logits; class 0 is free space
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    semantics: np.ndarray

    def __post_init__(self):
        for name in ("means", "scales", "rotations", "opacities", "semantics"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.means.shape[0]
        if self.means.shape != (n, 3) or self.scales.shape != (n, 3):
            raise ValidationError("means and scales must be (N, 3)")
        if self.rotations.shape != (n, 4) or self.opacities.shape != (n,):
            raise ValidationError("rotations must be (N, 4) and opacities (N,)")
        if self.semantics.ndim != 2 or self.semantics.shape[0] != n:
            raise ValidationError("semantics must be (N, C)")

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return GaussianAnchor(
                self.means[i], self.scales[i], self.rotations[i], float(self.opacities[i]), self.semantics[i]
            )
        return GaussianSet(self.means[i], self.scales[i], self.rotations[i], self.opacities[i], self.semantics[i])

    @property
    def num_classes(self):
        return self.semantics.shape[1]

    @classmethod
    def empty(cls, num_classes=NUM_CLASSES):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, num_classes)))

    @classmethod
    def from_anchors(cls, anchors):
        anchors = list(anchors)
        if not anchors:
            return cls.empty()
        return cls(
            np.stack([a.mean for a in anchors]),
            np.stack([a.scale for a in anchors]),
            np.stack([a.rotation for a in anchors]),
            np.array([a.opacity for a in anchors]),
            np.stack([a.semantics for a in anchors]),
        )

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        return cls(
            np.concatenate([s.means for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.rotations for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.semantics for s in sets]),
        )

    def to_rows(self):
        """Anchor vectors ``[mean, scale, rotation, opacity, semantics]`` as an (N, D) array."""
        return np.concatenate(
            [self.means, self.scales, self.rotations, self.opacities[:, None], self.semantics], axis=1
        )

    @classmethod
    def from_rows(cls, rows, num_classes=NUM_CLASSES):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, GEOMETRY_DIM + num_classes)
        return cls(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:])

    def validate(self, s_max=None, atol=1e-6):
        """Check the anchor invariants, raising :class:`ValidationError` on failure."""
        check_finite(self.to_rows(), "gaussian anchors")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ValidationError("rotation quaternions must have unit norm")
        if np.any(self.scales <= 0) or (s_max is not None and np.any(self.scales > s_max * (1 + 1e-12))):
            raise ValidationError("scales must lie in (0, s_max]")
        if np.any(self.opacities <= 0) or np.any(self.opacities >= 1):
            raise ValidationError("opacities must lie in (0, 1)")
        return self

    def covariances(self):
        return covariance(self)


@dataclass
class RawGaussians:
    """Unconstrained Gaussian parameters; :func:`activate` maps them to a valid set."""

    raw_means: np.ndarray
    raw_scales: np.ndarray
    raw_rotations: np.ndarray
    raw_opacities: np.ndarray
    raw_semantics: np.ndarray

    def __post_init__(self):
        for name in ("raw_means", "raw_scales", "raw_rotations", "raw_opacities", "raw_semantics"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))

    def __len__(self):
        return self.raw_means.shape[0]

    def to_vector(self):
        """Flatten into the (N, 11 + C) layout used by the refinement head."""
        return np.concatenate(
            [self.raw_means, self.raw_scales, self.raw_rotations, self.raw_opacities[:, None], self.raw_semantics],
            axis=1,
        )

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:, 0:3], v[:, 3:6], v[:, 6:10], v[:, 10], v[:, 11:])

    def copy(self):
        return RawGaussians.from_vector(self.to_vector())

    @classmethod
    def random(cls, n, rng, num_classes=NUM_CLASSES, mean_spread=1.5, opacity_logit=0.0):
        """Seeded initialization: means spread over the box, random rotations."""
        return cls(
            rng.uniform(-mean_spread, mean_spread, size=(n, 3)),
            rng.normal(0.0, 0.5, size=(n, 3)),
            rng.normal(size=(n, 4)),
            np.full(n, float(opacity_logit)),
            rng.normal(0.0, 0.1, size=(n, num_classes)),
        )


def _open_unit(p):
    # saturated sigmoids round to exactly 0 or 1; keep them strictly inside
    return np.clip(p, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def activate(raw, box, s_max):
    """Map unconstrained parameters to valid Gaussians inside ``box``.

    mean = origin + sigmoid(raw_mean) * extent, scale = sigmoid(raw_scale) * s_max,
    rotation = raw_rotation / |raw_rotation|, opacity = sigmoid(raw_opacity).
    """
    if not s_max > 0:
        raise ValidationError(f"s_max must be > 0, got {s_max}")
    norms = np.linalg.norm(raw.raw_rotations, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateRotationError("raw rotation has (near-)zero norm")
    origin = np.asarray(box.origin)
    extent = np.asarray(box.extent)
    return GaussianSet(
        origin + sigmoid(raw.raw_means) * extent,
        _open_unit(sigmoid(raw.raw_scales)) * s_max,
        raw.raw_rotations / norms,
        _open_unit(sigmoid(raw.raw_opacities)),
        raw.raw_semantics.copy(),
    )


def activate_backward(raw, box, s_max, grads):
    """Chain activated-space gradients back to the unconstrained parameters.

    ``grads`` is a :class:`~gaussocc.splat.SplatGradients`.  Its rotation
    gradient is tangent to the unit sphere, so only the ``1/|raw|`` factor of
    the normalization Jacobian remains.
    """
    sm = sigmoid(raw.raw_means)
    ss = sigmoid(raw.raw_scales)
    so = sigmoid(raw.raw_opacities)
    return RawGaussians(
        grads.means * sm * (1 - sm) * np.asarray(box.extent),
        grads.scales * ss * (1 - ss) * s_max,
        grads.rotations / np.linalg.norm(raw.raw_rotations, axis=1, keepdims=True),
        grads.opacities * so * (1 - so),
        grads.semantics,
    )


def covariance(anchors):
    """``Sigma = R diag(s^2) R^T`` for one anchor or a whole set."""
    if isinstance(anchors, GaussianAnchor):
        R = quaternion_to_matrix(anchors.rotation)
        return (R * np.asarray(anchors.scale) ** 2) @ R.T
    R = quaternion_to_matrix(anchors.rotations)
    return np.einsum("nij,nj,nkj->nik", R, anchors.scales**2, R)
