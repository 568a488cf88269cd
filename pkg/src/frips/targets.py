"""Unnormalised target densities, the stereographic lift and mode assignment.

Mixture targets expose per-component log densities so that samples can be
labelled by their most likely mode.  Component labels are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gammaln

from .errors import CapabilityError, ClassificationError, DomainError
from .geometry import Euclidean, Grassmann, Manifold, Sphere

_ANGLE_GRID = 4096


def logsumexp_last(a):
    """Log-sum-exp over a short last axis (pairwise ufunc calls beat a reduction there)."""
    a = np.asarray(a, dtype=float)
    out = a[..., 0]
    for j in range(1, a.shape[-1]):
        out = np.logaddexp(out, a[..., j])
    return out


class Target:
    """Interface shared by every target: ``log_q1``, optional gradient and bound."""

    manifold: Manifold
    has_grad: bool = True
    upper_bound_log: float | None = None

    def log_q1(self, x):
        raise NotImplementedError

    def grad_log_q1(self, x):
        raise CapabilityError(f"{type(self).__name__} has no gradient")

    def value_and_grad(self, x):
        return self.log_q1(x), self.grad_log_q1(x)

    def component_log_densities(self, x):
        raise CapabilityError(f"{type(self).__name__} has no mixture components")


@dataclass
class RiemannianMoG(Target):
    """Mixture of isotropic Riemannian Gaussians ``sum_j w_j exp(-dist(mu_j, x)^2 / 2 sigma_j^2)``.

    Per-component normalising constants are omitted from ``log_q1``.  The
    mixture weights enter the density but are meant for ground-truth draws and
    error metrics only.
    """

    manifold: Manifold
    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    cut_drops: int = field(default=0, init=False)

    def __post_init__(self):
        m = self.manifold
        self.means = np.asarray(self.means, dtype=float)
        j = self.means.shape[0]
        self.sigmas = np.broadcast_to(np.asarray(self.sigmas, dtype=float), (j,)).copy()
        self.weights = np.asarray(self.weights, dtype=float)
        if self.means.shape[1:] != m.point_shape:
            raise ValueError(f"means must have shape (J,) + {m.point_shape}")
        if self.weights.shape != (j,) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive with one entry per mean")
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")
        if not np.all(m.check_point(self.means)):
            raise ValueError("means are not valid manifold points")
        self.weights = self.weights / self.weights.sum()
        self.upper_bound_log = self._upper_bound()
        self._log_norm = self._component_log_norms()

    @property
    def n_components(self):
        return self.means.shape[0]

    def _sq_dists(self, x):
        m = self.manifold
        x = np.asarray(x, dtype=float)
        xe = np.expand_dims(x, x.ndim - m.point_ndim)
        return m.sq_dist(xe, self.means)

    def _component_logits(self, x):
        return np.log(self.weights) - self._sq_dists(x) / (2.0 * self.sigmas**2)

    def log_q1(self, x):
        return logsumexp_last(self._component_logits(x))

    def value_and_grad(self, x):
        m = self.manifold
        x = np.asarray(x, dtype=float)
        xe = np.expand_dims(x, x.ndim - m.point_ndim)
        v, ok, sq = m.log_with_sq_dist(xe, self.means)
        logits = np.log(self.weights) - sq / (2.0 * self.sigmas**2)
        val = logsumexp_last(logits)
        resp = np.exp(logits - val[..., None])
        self.cut_drops += int(np.size(ok) - np.count_nonzero(ok))
        coef = np.where(ok, resp / self.sigmas**2, 0.0)
        grad = np.sum(m.expand(coef) * v, axis=-1 - m.point_ndim)
        return val, grad

    def grad_log_q1(self, x):
        return self.value_and_grad(x)[1]

    def _component_log_norms(self):
        m = self.manifold
        if isinstance(m, Euclidean):
            return 0.5 * m.d * np.log(2 * np.pi * self.sigmas**2)
        if isinstance(m, Sphere):
            out = []
            for s in self.sigmas:
                th = np.linspace(0.0, np.pi, 20001)
                with np.errstate(divide="ignore"):
                    logf = -th**2 / (2 * s**2) + (m.d - 1) * np.log(np.sin(th))
                logf[0] = -np.inf if m.d > 1 else 0.0
                peak = logf.max()
                integral = trapezoid(np.exp(logf - peak), th)
                # area of the unit sphere of directions in the tangent space
                directions = Sphere(m.d - 1).log_volume if m.d > 1 else math.log(2.0)
                out.append(peak + np.log(integral) + directions)
            return np.array(out)
        # Grassmann: normalisers are equal for equal sigmas and are left out
        return np.zeros(self.n_components)

    def component_log_densities(self, x):
        return -self._sq_dists(x) / (2.0 * self.sigmas**2) - self._log_norm

    def _upper_bound(self):
        if self.n_components != 2:
            return float(np.log(self.weights.sum()))
        gap = float(self.manifold.dist(self.means[0], self.means[1]))
        a = np.linspace(0.0, gap, 20001)
        w1, w2 = self.weights
        s1, s2 = self.sigmas
        vals = np.logaddexp(np.log(w1) - a**2 / (2 * s1**2), np.log(w2) - (gap - a) ** 2 / (2 * s2**2))
        # grid refinement slack; the curve has bounded slope
        return float(vals.max() + 1e-4)

    def sample_component(self, j, rng, size):
        m = self.manifold
        mu = self.means[j]
        s = self.sigmas[j]
        if isinstance(m, Euclidean):
            return mu + s * rng.standard_normal((size,) + m.point_shape)
        if isinstance(m, Sphere):
            theta = _sample_sphere_angle(m.d, s, rng, size)
            base = np.broadcast_to(mu, (size,) + m.point_shape)
            direction = m.random_unit_tangent(base, rng)
            return m.exp(base, theta[:, None] * direction)
        raise CapabilityError("exact sampling is not available for Grassmann mixtures")


def _sample_sphere_angle(d, sigma, rng, size):
    """Inverse-CDF draws of the geodesic radius of a Riemannian Gaussian on S^d."""
    edges = np.linspace(0.0, np.pi, _ANGLE_GRID + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    logf = -mid**2 / (2 * sigma**2) + (d - 1) * np.log(np.sin(mid))
    mass = np.exp(logf - logf.max())
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    cdf /= cdf[-1]
    return np.interp(rng.uniform(size=size), cdf, edges)


@dataclass
class StudentMixture(Target):
    """Two-component multivariate Student-t mixture on R^d with common scale ``tau``."""

    mu1: np.ndarray
    mu2: np.ndarray
    tau: float = 0.05
    nu: float = 1.0
    weights: np.ndarray = field(default_factory=lambda: np.array([2 / 3, 1 / 3]))

    def __post_init__(self):
        self.means = np.stack([np.asarray(self.mu1, dtype=float), np.asarray(self.mu2, dtype=float)])
        if self.means.ndim != 2:
            raise ValueError("means must be vectors of equal length")
        if not (self.tau > 0 and self.nu > 0):
            raise ValueError("tau and nu must be positive")
        self.weights = np.asarray(self.weights, dtype=float)
        self.weights = self.weights / self.weights.sum()
        self.manifold = Euclidean(self.means.shape[1])
        self.upper_bound_log = float(np.log(self.weights.sum()))
        d, nu = self.manifold.d, self.nu
        self._log_norm = (
            gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu) - 0.5 * d * np.log(nu * np.pi) - d * np.log(self.tau)
        )

    @property
    def n_components(self):
        return 2

    def _log_kernels(self, x):
        diff = np.asarray(x, dtype=float)[..., None, :] - self.means
        r2 = np.sum(diff**2, axis=-1)
        d = self.manifold.d
        return -0.5 * (self.nu + d) * np.log1p(r2 / (self.nu * self.tau**2)), diff, r2

    def log_q1(self, x):
        return logsumexp_last(np.log(self.weights) + self._log_kernels(x)[0])

    def value_and_grad(self, x):
        lk, diff, r2 = self._log_kernels(x)
        logits = np.log(self.weights) + lk
        val = logsumexp_last(logits)
        resp = np.exp(logits - val[..., None])
        d = self.manifold.d
        comp = -(self.nu + d) * diff / (self.nu * self.tau**2 + r2)[..., None]
        return val, np.sum(resp[..., None] * comp, axis=-2)

    def grad_log_q1(self, x):
        return self.value_and_grad(x)[1]

    def component_log_densities(self, x):
        return self._log_kernels(x)[0] + self._log_norm

    def sample_component(self, j, rng, size):
        d = self.manifold.d
        z = rng.standard_normal((size, d))
        g = rng.chisquare(self.nu, size=size)
        return self.means[j] + self.tau * z / np.sqrt(g / self.nu)[:, None]


def _one_minus_last(z):
    # 1 - z_{d+1} without cancellation near the north pole
    last = z[..., -1]
    head2 = np.sum(z[..., :-1] ** 2, axis=-1)
    return np.where(last > 0, head2 / (1.0 + np.abs(last)), 1.0 - last)


def sp(z, radius):
    """Stereographic projection from the north pole of S^d onto R^d, scaled by ``radius``."""
    z = np.asarray(z, dtype=float)
    denom = _one_minus_last(z)
    if np.any(2.0 * denom < 1e-18):
        raise DomainError("stereographic projection is undefined at the north pole")
    return radius * z[..., :-1] / denom[..., None]


def sp_inv(x, radius):
    """Inverse stereographic projection R^d -> S^d."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x**2, axis=-1, keepdims=True)
    denom = r2 + radius**2
    return np.concatenate([2.0 * radius * x / denom, (r2 - radius**2) / denom], axis=-1)


@dataclass
class StereographicLift(Target):
    """Pullback of a Euclidean target to S^d through the scaled stereographic projection.

    ``log q(z) = log q_inner(SP(z)) + d log((|SP(z)|^2 + R^2) / (2R))``.  The
    lifted density of a heavy-tailed target can be unbounded near the north
    pole, so no upper bound is offered.
    """

    inner: Target
    radius: float | None = None

    def __post_init__(self):
        if not isinstance(self.inner.manifold, Euclidean):
            raise ValueError("the lifted target must live on R^d")
        d = self.inner.manifold.d
        if self.radius is None:
            self.radius = math.sqrt(d)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        self.manifold = Sphere(d)
        self.has_grad = self.inner.has_grad
        self.upper_bound_log = None

    @property
    def n_components(self):
        return self.inner.n_components

    @property
    def weights(self):
        return self.inner.weights

    def _log_jac(self, z):
        d = self.manifold.d
        return d * (np.log(self.radius) - np.log(_one_minus_last(z)))

    def log_q1(self, z):
        return self.inner.log_q1(sp(z, self.radius)) + self._log_jac(z)

    def value_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        d, r = self.manifold.d, self.radius
        x = sp(z, r)
        val, g = self.inner.value_and_grad(x)
        om = _one_minus_last(z)[..., None]
        ambient = np.concatenate(
            [r * g / om, r * np.sum(z[..., :-1] * g, axis=-1, keepdims=True) / om**2], axis=-1
        )
        north = np.zeros(d + 1)
        north[-1] = 1.0
        ambient = ambient + d * north / om
        return val + self._log_jac(z), self.manifold.proj(z, ambient)

    def grad_log_q1(self, z):
        return self.value_and_grad(z)[1]

    def component_log_densities(self, z):
        return self.inner.component_log_densities(sp(z, self.radius)) + self._log_jac(z)[..., None]

    def sample_component(self, j, rng, size):
        return sp_inv(self.inner.sample_component(j, rng, size), self.radius)


class CountingTarget(Target):
    """Wrapper that counts every point at which ``q1`` is evaluated.

    A joint value-and-gradient call counts once per point; so does a bare
    gradient call.
    """

    def __init__(self, inner):
        self.inner = inner
        self.count = 0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    @property
    def manifold(self):
        return self.inner.manifold

    @property
    def has_grad(self):
        return self.inner.has_grad

    @property
    def upper_bound_log(self):
        return self.inner.upper_bound_log

    def _tally(self, x):
        self.count += int(np.prod(self.manifold.batch_shape(x), dtype=np.int64))

    def log_q1(self, x):
        self._tally(x)
        return self.inner.log_q1(x)

    def value_and_grad(self, x):
        self._tally(x)
        return self.inner.value_and_grad(x)

    def grad_log_q1(self, x):
        self._tally(x)
        return self.inner.grad_log_q1(x)

    def component_log_densities(self, x):
        return self.inner.component_log_densities(x)


def mode_assign(x, target, counts=None):
    """Label each point with ``argmax_i log N_i + log q_{1,i}(x)``; ties go to the lowest index."""
    comp = target.component_log_densities(x)
    if counts is None:
        counts = np.ones(comp.shape[-1])
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 1):
        raise ValueError("component counts must be at least 1")
    scores = np.log(counts) + comp
    if np.any(np.all(np.isneginf(scores), axis=-1)):
        raise ClassificationError("no component has positive density at the point")
    return np.argmax(scores, axis=-1)


def ground_truth_sampler(target, rng, size):
    """Exact draws from the normalised target, using its true mixture weights."""
    if isinstance(target, CountingTarget):
        target = target.inner
    if not hasattr(target, "sample_component"):
        raise CapabilityError(f"no exact sampler for {type(target).__name__}")
    if isinstance(target, RiemannianMoG) and isinstance(target.manifold, Grassmann):
        raise CapabilityError("exact sampling is not available for Grassmann mixtures")
    labels = rng.choice(target.n_components, size=size, p=target.weights)
    out = np.empty((size,) + target.manifold.point_shape)
    for j in range(target.n_components):
        idx = np.flatnonzero(labels == j)
        if idx.size:
            out[idx] = target.sample_component(j, rng, idx.size)
    return out, labels
