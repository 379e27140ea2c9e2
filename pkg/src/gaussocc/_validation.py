"""Input validation helpers shared by the estimators and the CLI."""

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate a documented contract."""


class NumericalError(RuntimeError):
    """Raised when an optimization produces non-finite values."""


def check_finite(x, name="array"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return labels


def check_probs(probs, atol=1e-6):
    """Per-voxel class probabilities as a (V, C) float array on the simplex."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        probs = probs.reshape(-1, probs.shape[-1])
    check_finite(probs, "probabilities")
    if np.any(probs < -atol) or np.any(np.abs(probs.sum(axis=1) - 1.0) > atol):
        raise ValidationError("probabilities must lie on the simplex")
    return probs


def check_same_dims(a, b):
    if tuple(a.dims) != tuple(b.dims):
        raise ValidationError(f"grid dims differ: {a.dims} vs {b.dims}")
