"""Fit semantic Gaussians to a labelled occupancy grid by gradient descent.

The loss is ``w_focal * focal + w_lovasz * lovasz + w_geo * geo_affinity +
w_sem * sem_affinity`` on per-voxel probabilities derived from the splatted
semantic mass.  Gradients are analytic end to end: loss -> probabilities ->
semantic field -> anchors -> unconstrained parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import NumericalError, ValidationError, check_positive
from .gaussians import NUM_CLASSES, RawGaussians, activate, activate_backward, logit
from .objectives import (
    focal_loss,
    iou_miou,
    lovasz_softmax,
    mass_to_probs,
    mass_to_probs_backward,
    scene_class_affinity,
)
from .splat import DEFAULT_CUTOFF, OccupancyGrid, field_to_grid, splat_backward, splat_forward

log = logging.getLogger(__name__)

LOSS_TERMS = ("focal", "lovasz", "geo", "sem")
# free-class background mass added before normalizing splat mass to probabilities
FREE_MASS = 0.05


@dataclass
class Adam:
    """Adaptive moment descent on a flat parameter vector, without weight decay."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: np.ndarray = field(default=None, repr=False)
    _v: np.ndarray = field(default=None, repr=False)
    _t: int = 0

    def step(self, params, grad):
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1**self._t)
        v_hat = self._v / (1 - self.beta2**self._t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FitResult:
    raw: RawGaussians
    anchors: object
    curve: np.ndarray  # (steps, 6): step, total, focal, lovasz, geo, sem
    prediction: OccupancyGrid


def init_raw(gt, n, rng, num_classes=NUM_CLASSES, init="occupied"):
    """Initial unconstrained parameters.

    ``init="occupied"`` puts means at random occupied voxel centers (jittered
    within the voxel) and falls back to uniform placement on an empty grid.
    """
    box = gt.box
    occ = np.argwhere(gt.labels != 0)
    if init == "occupied" and len(occ):
        picks = occ[rng.integers(0, len(occ), size=n)]
        pos = (picks + rng.uniform(0.25, 0.75, size=(n, 3))) / np.asarray(box.dims)
    elif init in ("occupied", "uniform"):
        pos = rng.uniform(0.02, 0.98, size=(n, 3))
    else:
        raise ValidationError(f"unknown init {init!r}")
    return RawGaussians(
        logit(pos),
        np.zeros((n, 3)),
        rng.normal(size=(n, 4)),
        np.zeros(n),
        rng.normal(0.0, 0.01, size=(n, num_classes)),
    )


def occupancy_loss(values, labels, weights, free_mass, focal_gamma=2.0, focal_alpha=1.0):
    """Total loss, per-term values and ``dL/dvalues`` for a semantic mass array."""
    shape = values.shape
    probs = mass_to_probs(values, free_mass=free_mass)
    labels = labels.reshape(-1)
    terms = {
        "focal": focal_loss(probs, labels, focal_gamma, focal_alpha, return_grad=True),
        "lovasz": lovasz_softmax(probs, labels, return_grad=True),
        "geo": scene_class_affinity(probs, labels, "geometry", return_grad=True),
        "sem": scene_class_affinity(probs, labels, "semantic", return_grad=True),
    }
    total = 0.0
    grad_p = np.zeros_like(probs)
    for name, (v, g) in terms.items():
        w = weights.get(name, 1.0)
        total += w * v
        grad_p += w * g
    grad_v = mass_to_probs_backward(values, probs, grad_p, free_mass=free_mass)
    return total, {k: v for k, (v, _) in terms.items()}, grad_v.reshape(shape)


def fit_gaussians(
    gt,
    n_gaussians,
    s_max,
    steps,
    lr=1e-2,
    betas=(0.9, 0.999),
    eps=1e-8,
    loss_weights=None,
    free_mass=None,
    cutoff_sigma=DEFAULT_CUTOFF,
    seed=0,
    init="occupied",
    threads=None,
    raw=None,
    callback=None,
):
    """Fit ``n_gaussians`` anchors to ``gt``; returns a :class:`FitResult`.

    ``free_mass`` (default ``FREE_MASS``) is the free-class background of the
    probability map; it also serves as the mass floor when extracting the
    predicted labels, so training and prediction agree on what is free.
    Raises :class:`NumericalError` if the loss becomes non-finite.
    """
    if int(n_gaussians) < 1:
        raise ValidationError("n_gaussians must be >= 1")
    check_positive(s_max, "s_max")
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    weights = {k: 1.0 for k in LOSS_TERMS}
    weights.update(loss_weights or {})
    free_mass = FREE_MASS if free_mass is None else free_mass
    rng = np.random.default_rng(seed)
    box = gt.box
    if raw is None:
        raw = init_raw(gt, int(n_gaussians), rng, init=init)
    opt = Adam(lr, betas[0], betas[1], eps)
    params = raw.to_vector()
    curve = np.zeros((steps, 6))
    labels = gt.labels.astype(np.int64)
    for it in range(steps):
        raw = RawGaussians.from_vector(params)
        anchors = activate(raw, box, s_max)
        fld = splat_forward(anchors, box, cutoff_sigma, threads=threads)
        total, parts, grad_v = occupancy_loss(fld.values, labels, weights, free_mass)
        if not np.isfinite(total):
            raise NumericalError(f"non-finite loss at step {it}: {parts}")
        curve[it] = [it, total] + [parts[k] for k in LOSS_TERMS]
        g = splat_backward(anchors, box, grad_v, cutoff_sigma, threads=threads)
        graw = activate_backward(raw, box, s_max, g).to_vector()
        if not np.all(np.isfinite(graw)):
            raise NumericalError(f"non-finite gradient at step {it}")
        params = opt.step(params, graw)
        if callback is not None:
            callback(it, total, parts)
        if it % 100 == 0:
            log.debug("step %d loss %.5f %s", it, total, parts)
    raw = RawGaussians.from_vector(params)
    anchors = activate(raw, box, s_max)
    pred = field_to_grid(splat_forward(anchors, box, cutoff_sigma, threads=threads), mass_floor=free_mass)
    return FitResult(raw, anchors, curve, pred)


class GaussianFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_gaussians`.

    ``fit(gt)`` takes an :class:`~gaussocc.splat.OccupancyGrid`; ``predict()``
    returns the splatted label grid and ``score(gt)`` its occupied IoU.
    """

    def __init__(self, n_gaussians=16200, s_max=0.08, steps=2000, lr=1e-2, cutoff_sigma=DEFAULT_CUTOFF,
                 free_mass=None, loss_weights=None, init="occupied", random_state=0, threads=None):
        self.n_gaussians = n_gaussians
        self.s_max = s_max
        self.steps = steps
        self.lr = lr
        self.cutoff_sigma = cutoff_sigma
        self.free_mass = free_mass
        self.loss_weights = loss_weights
        self.init = init
        self.random_state = random_state
        self.threads = threads

    def fit(self, gt, y=None):
        if not isinstance(gt, OccupancyGrid):
            raise ValidationError("GaussianFitter.fit expects an OccupancyGrid")
        result = fit_gaussians(
            gt, self.n_gaussians, self.s_max, self.steps, lr=self.lr, loss_weights=self.loss_weights,
            free_mass=self.free_mass, cutoff_sigma=self.cutoff_sigma, seed=self.random_state,
            init=self.init, threads=self.threads,
        )
        self.raw_ = result.raw
        self.anchors_ = result.anchors
        self.loss_curve_ = result.curve
        self.prediction_ = result.prediction
        return self

    def _check_fitted(self):
        if not hasattr(self, "anchors_"):
            raise ValidationError("GaussianFitter is not fitted yet")

    def predict(self, X=None):
        self._check_fitted()
        return self.prediction_

    def transform(self, X=None):
        """The fitted semantic field over the training box."""
        self._check_fitted()
        return splat_forward(self.anchors_, self.prediction_.box, self.cutoff_sigma, threads=self.threads)

    def score(self, gt, y=None):
        self._check_fitted()
        return iou_miou(self.prediction_, gt).iou
