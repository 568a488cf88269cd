"""Geodesic interpolant: noising maps, conditional densities and their scores.

The interpolant is ``X_t = psi_t(X_0; X_1) = Exp_{X_1}((1 - t) Log_{X_1} X_0)``
with an independent coupling.  The base is uniform on compact manifolds and an
isotropic Gaussian on R^d.  All functions broadcast over leading batch axes;
``t`` is a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, DomainError
from .geometry import Euclidean, Manifold, Sphere

# points closer than this (in cut-fraction units) to the support boundary are outside
SUPPORT_MARGIN = 1e-12
FD_STEP = 1e-5
_SMALL_ANGLE = 1e-4


@dataclass(frozen=True)
class UniformBase:
    """Normalised Riemannian volume on a compact manifold."""


@dataclass(frozen=True)
class GaussianBase:
    """Isotropic Gaussian N(0, sigma0^2 I) on R^d."""

    sigma0: float = 1.0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")


@dataclass(frozen=True)
class InterpolantCtx:
    manifold: Manifold
    base: object = None

    def __post_init__(self):
        base = self.base
        if base is None:
            base = UniformBase() if self.manifold.compact else GaussianBase()
            object.__setattr__(self, "base", base)
        if isinstance(base, UniformBase) and not self.manifold.compact:
            raise ValueError("a uniform base needs a compact manifold")
        if isinstance(base, GaussianBase) and not isinstance(self.manifold, Euclidean):
            raise ValueError("a Gaussian base is only supported on Euclidean space")

    @property
    def euclidean(self):
        return isinstance(self.manifold, Euclidean)

    def sample_base(self, rng, size=()):
        if isinstance(self.base, UniformBase):
            return self.manifold.sample_uniform(rng, size)
        size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        return self.base.sigma0 * rng.standard_normal(size + self.manifold.point_shape)

    def log_base(self, x):
        if isinstance(self.base, UniformBase):
            return np.full(self.manifold.batch_shape(x), -self.manifold.log_volume)
        d = self.manifold.d
        s2 = self.base.sigma0**2
        return -0.5 * np.sum(np.asarray(x) ** 2, axis=-1) / s2 - 0.5 * d * np.log(2 * np.pi * s2)


def _check_t(t):
    if not t < 1.0:
        raise DomainError("interpolation time must satisfy t < 1")


def psi(ctx, t, x0, x1):
    """Noised point ``Exp_{x1}((1 - t) Log_{x1} x0)``."""
    m = ctx.manifold
    return m.exp(x1, (1.0 - t) * m.log(x1, x0))


def psi_inv(ctx, t, xt, x1):
    """``Exp_{x1}(Log_{x1} xt / (1 - t))``; only an inverse of ``psi`` inside the support."""
    _check_t(t)
    m = ctx.manifold
    return m.exp(x1, m.log(x1, xt) / (1.0 - t))


def _support_spectrum(ctx, t, xt, x1):
    """Support indicator and the singular values of ``Log_{x1} xt`` (compact manifolds)."""
    m = ctx.manifold
    s = m.spectrum(x1, xt)
    frac = m.cut_fraction_spectrum(s)
    return frac < (1.0 - t) - SUPPORT_MARGIN, s


def in_support(ctx, t, xt, x1):
    """True iff ``xt`` lies in the image of the injectivity domain of ``x1`` scaled by ``1 - t``."""
    _check_t(t)
    if ctx.euclidean:
        shape = np.broadcast_shapes(ctx.manifold.batch_shape(xt), ctx.manifold.batch_shape(x1))
        return np.ones(shape, dtype=bool)
    return _support_spectrum(ctx, t, xt, x1)[0]


def log_p_t_given_1(ctx, t, xt, x1):
    """Log conditional density of ``X_t`` given ``X_1`` (``-inf`` outside the support)."""
    _check_t(t)
    m = ctx.manifold
    if ctx.euclidean:
        x0 = (np.asarray(xt, dtype=float) - t * np.asarray(x1, dtype=float)) / (1.0 - t)
        return ctx.log_base(x0) - m.d * np.log1p(-t)
    inside, s = _support_spectrum(ctx, t, xt, x1)
    s = np.where(inside[..., None], s, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -m.log_volume - m.dim * np.log1p(-t) + m.log_jac_spectrum(s / (1.0 - t)) - m.log_jac_spectrum(s)
    return np.where(inside, val, -np.inf)


def _sphere_coef(d, t, theta):
    """d/dtheta of the negated log density, written as the coefficient of the unit direction."""
    small = theta < _SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = th / (1.0 - t)
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = 1.0 / np.tan(th) - 1.0 / (np.tan(a) * (1.0 - t))
    series = theta / 3.0 * (1.0 / (1.0 - t) ** 2 - 1.0)
    return (d - 1) * np.where(small, series, exact)


def _sphere_score(m, t, base, other):
    """Gradient at ``base`` of ``log p_{t|1}`` seen as a function of the angle to ``other``."""
    c = np.sum(base * other, axis=-1, keepdims=True)
    u = other - c * base
    s = np.linalg.norm(u, axis=-1, keepdims=True)
    theta = np.arctan2(s, c)
    coef = _sphere_coef(m.d, t, theta)
    return np.where(s > 0, coef / np.where(s > 0, s, 1.0), 0.0) * u


def fd_grad(m, f, x, h=None):
    """Riemannian gradient of ``f`` at ``x`` by central differences along geodesics.

    ``f`` maps points of shape ``batch + (2, dim) + point_shape`` (or with
    singleton ``(1, 1)`` axes) to values of shape ``batch + (2, dim)``.  Steps
    follow an orthonormal tangent basis.  One-sided differences are used when
    one side is ``-inf``; directions where both sides are ``-inf`` get 0.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = FD_STEP * np.maximum(1.0, m.norm(x))
    h = np.broadcast_to(np.asarray(h, dtype=float), m.batch_shape(x))
    pts, basis = m.basis_geodesics(x, h)
    vals = f(pts)
    fp, fm = vals[..., 0, :], vals[..., 1, :]
    nb = x.ndim - m.point_ndim
    f0 = f(np.expand_dims(x, (nb, nb + 1)))[..., 0, :]
    hh = h[..., None]
    with np.errstate(invalid="ignore"):
        central = (fp - fm) / (2.0 * hh)
        fwd = (fp - f0) / hh
        bwd = (f0 - fm) / hh
    okp, okm = np.isfinite(fp), np.isfinite(fm)
    coeffs = np.where(okp & okm, central, np.where(okp, fwd, np.where(okm, bwd, 0.0)))
    coeffs = np.where(np.isfinite(coeffs), coeffs, 0.0)
    grad = np.sum(m.expand(coeffs) * basis, axis=-1 - m.point_ndim)
    return m.proj(x, grad)


def _grad_xt(ctx, t, xt, x1):
    m = ctx.manifold
    if ctx.euclidean:
        s2 = ctx.base.sigma0**2
        return (t * np.asarray(x1) - np.asarray(xt)) / ((1.0 - t) ** 2 * s2)
    if isinstance(m, Sphere):
        return _sphere_score(m, t, np.asarray(xt, dtype=float), np.asarray(x1, dtype=float))
    x1 = np.asarray(x1, dtype=float)
    return fd_grad(m, lambda p: log_p_t_given_1(ctx, t, p, x1[..., None, None, :, :]), xt)


def _grad_x1(ctx, t, xt, x1):
    m = ctx.manifold
    if ctx.euclidean:
        s2 = ctx.base.sigma0**2
        return t * (np.asarray(xt) - t * np.asarray(x1)) / ((1.0 - t) ** 2 * s2)
    if isinstance(m, Sphere):
        return _sphere_score(m, t, np.asarray(x1, dtype=float), np.asarray(xt, dtype=float))
    xt = np.asarray(xt, dtype=float)
    return fd_grad(m, lambda p: log_p_t_given_1(ctx, t, xt[..., None, None, :, :], p), x1)


def log_p_and_grad_x1(ctx, t, xt, x1):
    """``log p_{t|1}(xt | x1)`` together with its gradient in ``x1`` (unchecked outside the support).

    On the sphere both come from a single angle evaluation.
    """
    m = ctx.manifold
    if not isinstance(m, Sphere):
        return log_p_t_given_1(ctx, t, xt, x1), _grad_x1(ctx, t, xt, x1)
    _check_t(t)
    x1 = np.asarray(x1, dtype=float)
    xt = np.asarray(xt, dtype=float)
    c = np.einsum("...i,...i->...", x1, xt)[..., None]
    u = xt - c * x1
    s = np.sqrt(np.einsum("...i,...i->...", u, u))[..., None]
    theta = np.arctan2(s, c)
    th = theta[..., 0]
    inside = th / np.pi < (1.0 - t) - SUPPORT_MARGIN
    s_in = np.where(inside, th, 0.0)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -m.log_volume - m.d * np.log1p(-t) + m.log_jac_spectrum(s_in / (1.0 - t)) - m.log_jac_spectrum(s_in)
        coef = _sphere_coef(m.d, t, theta)
        grad = np.where(s > 0, coef / np.where(s > 0, s, 1.0), 0.0) * u
    return np.where(inside, val, -np.inf), grad


def grad_xt_log_p_t_given_1(ctx, t, xt, x1):
    """Gradient in ``xt`` of the log conditional density."""
    _check_t(t)
    if not np.all(in_support(ctx, t, xt, x1)):
        raise DomainError("conditional score requested outside the support")
    return _grad_xt(ctx, t, xt, x1)


def log_posterior(ctx, t, xt, x1, target):
    """Unnormalised log denoising posterior ``log p_{t|1}(xt|x1) + log q1(x1)``."""
    lp = log_p_t_given_1(ctx, t, xt, x1)
    x1b = np.broadcast_to(x1, lp.shape + ctx.manifold.point_shape)
    lq = target.log_q1(x1b)
    return np.where(np.isfinite(lp), lp + lq, -np.inf)


def grad_x1_log_posterior(ctx, t, xt, x1, target):
    """Gradient in ``x1`` of the unnormalised log denoising posterior."""
    _check_t(t)
    if not getattr(target, "has_grad", False):
        raise CapabilityError("target provides no gradient; use a zeroth-order backbone")
    if not np.all(in_support(ctx, t, xt, x1)):
        raise DomainError("posterior score requested outside the support")
    return _grad_x1(ctx, t, xt, x1) + target.grad_log_q1(x1)


def sample_nu(ctx, t, xt, rng, n=None):
    """Exact draws from the law with density proportional to ``x1 -> p_{t|1}(xt|x1)``.

    With ``n`` given, ``n`` draws per point are returned along a new axis placed
    right after the batch axes of ``xt``.
    """
    _check_t(t)
    m = ctx.manifold
    xt = np.asarray(xt, dtype=float)
    batch = m.batch_shape(xt)
    if n is not None:
        xt = np.expand_dims(xt, len(batch))
        batch = batch + (n,)
    if ctx.euclidean:
        if t <= 0.0:
            raise DomainError("the proposal law is improper at t = 0 on Euclidean space")
        z = rng.standard_normal(batch + m.point_shape)
        return xt / t + (1.0 - t) * ctx.base.sigma0 / t * z
    return m.shrink_uniform(xt, 1.0 - t, rng, batch)
