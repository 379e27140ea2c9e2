"""Occupancy losses and evaluation metrics.

All losses take per-voxel class probabilities ``probs`` of shape ``(V, C)``
and integer labels of shape ``(V,)``.  With ``return_grad=True`` they return
``(value, d value / d probs)`` so the fitting loop can chain them into the
splatting backward pass without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_labels, check_probs, check_same_dims
from .gaussians import CLASS_NAMES

LOG_CLAMP = 1e-12
PROB_EPS = 1e-8


def mass_to_probs(values, free_mass=0.0, eps=PROB_EPS):
    """Map nonnegative semantic mass ``(..., C)`` to per-voxel probabilities.

    ``probs = softmax(log(values + eps))`` after adding ``free_mass`` to the
    free class, so voxels no Gaussian reaches are confidently free.
    """
    a = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1]) + eps
    a[:, 0] += free_mass
    return a / a.sum(axis=1, keepdims=True)


def mass_to_probs_backward(values, probs, grad_probs, free_mass=0.0, eps=PROB_EPS):
    """Chain ``dL/dprobs`` back to ``dL/dvalues`` (same flattened layout)."""
    a = np.asarray(values, dtype=np.float64).reshape(probs.shape)
    total = a.sum(axis=1, keepdims=True) + probs.shape[1] * eps + free_mass
    return (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True)) / total


def _prepare(probs, labels):
    probs = check_probs(probs)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise ValidationError(f"{labels.shape[0]} labels for {probs.shape[0]} voxels")
    labels = check_labels(labels.astype(np.int64), probs.shape[1])
    return probs, labels


def focal_loss(probs, labels, gamma=2.0, alpha=1.0, return_grad=False):
    """Mean of ``-alpha (1 - p_t)^gamma log p_t`` over voxels."""
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    probs, labels = _prepare(probs, labels)
    n = probs.shape[0]
    idx = np.arange(n)
    raw_pt = probs[idx, labels]
    pt = np.maximum(raw_pt, LOG_CLAMP)
    one_minus = np.maximum(1.0 - pt, 0.0)
    log_pt = np.log(pt)
    value = float(np.mean(-alpha * one_minus**gamma * log_pt)) if n else 0.0
    if not return_grad:
        return value
    if gamma == 0:
        dmod = np.zeros_like(pt)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1), 0.0)
    dpt = -alpha * (-dmod * log_pt + one_minus**gamma / pt)
    dpt[raw_pt < LOG_CLAMP] = 0.0
    grad = np.zeros_like(probs)
    grad[idx, labels] = dpt / max(n, 1)
    return value, grad


def lovasz_grad(gt_sorted):
    """Increments of the Jaccard loss along a sorted ground-truth indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, return_grad=False):
    """Lovász extension of the per-class Jaccard loss, averaged over classes present in ``labels``."""
    probs, labels = _prepare(probs, labels)
    classes = np.unique(labels)
    grad = np.zeros_like(probs)
    losses = []
    for c in classes:
        fg = (labels == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[order])
        losses.append(float(errors[order] @ g))
        # d|fg - p|/dp is -1 on foreground voxels and +1 elsewhere
        grad[order, c] = g * np.where(fg[order] > 0, -1.0, 1.0)
    if not losses:
        value = 0.0
    else:
        value = float(np.mean(losses))
        grad /= len(losses)
    return (value, grad) if return_grad else value


def scene_class_affinity(probs, labels, mode="semantic", return_grad=False):
    """Soft precision / recall / specificity loss.

    ``mode="geometry"`` scores occupied-vs-free masses; ``mode="semantic"``
    averages the per-class score over nonfree classes present in ``labels``.
    Each score is the mean of ``-log`` over its defined terms; a term whose
    denominator vanishes is dropped.
    """
    if mode not in ("geometry", "semantic"):
        raise ValidationError(f"unknown affinity mode {mode!r}")
    probs, labels = _prepare(probs, labels)
    grad = np.zeros_like(probs)
    if mode == "geometry":
        target = (labels != 0).astype(np.float64)
        value, d = _affinity_terms(1.0 - probs[:, 0], target)
        grad[:, 0] = -d
        return (value, grad) if return_grad else value

    classes = [c for c in np.unique(labels) if c != 0]
    if not classes:
        return (0.0, grad) if return_grad else 0.0
    total = 0.0
    for c in classes:
        v, d = _affinity_terms(probs[:, c], (labels == c).astype(np.float64))
        total += v
        grad[:, c] += d / len(classes)
    value = total / len(classes)
    return (value, grad) if return_grad else value


def _affinity_terms(p, t):
    """Score one soft positive mass ``p`` against indicator ``t``; returns value and d/dp."""
    pos = t.sum()
    neg = (1.0 - t).sum()
    pred_mass = p.sum()
    inter = float(np.dot(p, t))
    true_neg = float(np.dot(1.0 - p, 1.0 - t))
    # (value of the term, gradient of log(term) w.r.t. p)
    terms = []
    if pos > 0 and pred_mass > 0:
        dlog = t / inter - 1.0 / pred_mass if inter > 0 else np.zeros_like(p)
        terms.append((inter / pred_mass, dlog))
    if pos > 0:
        dlog = t / inter if inter > 0 else np.zeros_like(p)
        terms.append((inter / pos, dlog))
    if neg > 0:
        dlog = -(1.0 - t) / true_neg if true_neg > 0 else np.zeros_like(p)
        terms.append((true_neg / neg, dlog))
    if not terms:
        return 0.0, np.zeros_like(p)
    k = len(terms)
    value = 0.0
    grad = np.zeros_like(p)
    for term, dlog in terms:
        value -= np.log(max(term, LOG_CLAMP)) / k
        if term > LOG_CLAMP:
            grad -= dlog / k
    return float(value), grad


@dataclass
class OccupancyMetrics:
    """IoU over occupied voxels, per-class IoU for classes 1..C-1, and their mean.

    ``valid`` is False when the evaluation mask is empty; all values are NaN then.
    """

    iou: float
    class_iou: np.ndarray
    miou: float
    valid: bool = True

    def rows(self, class_names=CLASS_NAMES):
        """``(metric, class, value)`` rows for the metrics CSV."""
        out = [("iou", "", self.iou), ("miou", "", self.miou)]
        for c, v in enumerate(self.class_iou, start=1):
            out.append(("class_iou", class_names[c] if c < len(class_names) else str(c), v))
        out.append(("valid", "", float(self.valid)))
        return out


def iou_miou(pred, gt, mask=None, num_classes=len(CLASS_NAMES)):
    """Occupied IoU, per-class IoU and mIoU of ``pred`` against ``gt`` inside ``mask``.

    mIoU averages over classes present in ``gt`` or ``pred`` within the mask.
    """
    check_same_dims(pred, gt)
    p = np.asarray(pred.labels).reshape(-1).astype(np.int64)
    g = np.asarray(gt.labels).reshape(-1).astype(np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != tuple(pred.dims):
            raise ValidationError(f"mask shape {mask.shape} does not match grid dims {pred.dims}")
        m = mask.reshape(-1)
        p, g = p[m], g[m]
    nan_classes = np.full(num_classes - 1, np.nan)
    if p.size == 0:
        return OccupancyMetrics(np.nan, nan_classes, np.nan, valid=False)
    occ_p, occ_g = p != 0, g != 0
    union = np.count_nonzero(occ_p | occ_g)
    iou = np.count_nonzero(occ_p & occ_g) / union if union else np.nan
    class_iou = nan_classes.copy()
    for c in range(1, num_classes):
        pc, gc = p == c, g == c
        u = np.count_nonzero(pc | gc)
        if u:
            class_iou[c - 1] = np.count_nonzero(pc & gc) / u
    present = ~np.isnan(class_iou)
    miou = float(class_iou[present].mean()) if present.any() else np.nan
    return OccupancyMetrics(float(iou), class_iou, miou)
