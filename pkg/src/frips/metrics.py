"""Sample-quality metrics: dominant-mode weight, manifold Wasserstein distance, tail MSLE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .targets import mode_assign

WASSERSTEIN_CAP = 512


class UndefinedMetricError(ValueError):
    """The metric has no valid input left to average over."""


def mode_weight_error(samples, target, true_w, component=0, counts=None):
    """Fraction of samples labelled ``component`` and its relative error against ``true_w``."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    labels = mode_assign(samples, target, counts)
    w_hat = float(np.mean(labels == component))
    return w_hat, abs(w_hat - true_w) / true_w


def stratified_subsample(n, k, rng=None):
    """``k`` indices out of ``range(n)``, one per equal-width stratum.

    Without ``rng`` the midpoint of every stratum is taken.
    """
    if k >= n:
        return np.arange(n)
    edges = np.linspace(0, n, k + 1)
    if rng is None:
        pos = 0.5 * (edges[:-1] + edges[1:])
    else:
        pos = edges[:-1] + rng.uniform(size=k) * np.diff(edges)
    return np.minimum(pos.astype(int), n - 1)


def wasserstein(samples_a, samples_b, manifold, cap=WASSERSTEIN_CAP, rng=None):
    """Mean geodesic cost of the optimal matching between two equal-size batches.

    Batches are cut to the smaller size, capped at ``cap``, by stratified
    subsampling; the assignment problem is solved exactly.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    na, nb = manifold.batch_shape(a)[0], manifold.batch_shape(b)[0]
    if na == 0 or nb == 0:
        raise ValueError("empty sample batch")
    k = min(na, nb, cap)
    a = a[stratified_subsample(na, k, rng)]
    b = b[stratified_subsample(nb, k, rng)]
    cost = manifold.dist(a[:, None], b[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def msle(samples, ground_truth, xi=0.99):
    """Mean squared log error between the upper order statistics of two sample sets.

    For each coordinate the ``ceil((1 - xi) n)`` largest values of both sets
    are compared in log space.  Coordinates where one of those values is not
    positive are skipped with a warning.
    """
    x = np.sort(np.asarray(ground_truth, dtype=float), axis=0)
    y = np.sort(np.asarray(samples, dtype=float), axis=0)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("samples and ground truth must be (n, d) arrays of the same shape")
    n = x.shape[0]
    k = max(1, math.ceil((1.0 - xi) * n - 1e-9))
    tx, ty = x[n - k :], y[n - k :]
    valid = np.all(tx > 0, axis=0) & np.all(ty > 0, axis=0)
    if not np.all(valid):
        warnings.warn(f"skipping {int((~valid).sum())} coordinate(s) with non-positive tail values", stacklevel=2)
    if not np.any(valid):
        raise UndefinedMetricError("no coordinate has positive tail order statistics")
    diff = np.log(tx[:, valid]) - np.log(ty[:, valid])
    return float(np.mean(diff**2))


@dataclass
class MetricReport:
    """Per-repetition metric values and their mean and standard deviation."""

    true_w: float
    w_hat: list = field(default_factory=list)
    relative_error: list = field(default_factory=list)
    wasserstein: list = field(default_factory=list)
    msle: list = field(default_factory=list)
    n_samples: list = field(default_factory=list)

    def add(self, w_hat, rel_err, n, wasserstein=None, msle=None):
        self.w_hat.append(w_hat)
        self.relative_error.append(rel_err)
        self.n_samples.append(n)
        if wasserstein is not None:
            self.wasserstein.append(wasserstein)
        if msle is not None:
            self.msle.append(msle)

    @staticmethod
    def _stats(values):
        if not values:
            return None
        v = np.asarray(values, dtype=float)
        return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0

    def summary(self):
        return {
            "true_w": self.true_w,
            "w_hat": self._stats(self.w_hat),
            "relative_error": self._stats(self.relative_error),
            "wasserstein": self._stats(self.wasserstein),
            "msle": self._stats(self.msle),
            "n_repetitions": len(self.w_hat),
        }
