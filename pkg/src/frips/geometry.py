"""Manifold kernels for Euclidean space, spheres and Grassmann manifolds.

Every operation is vectorised over leading batch axes: a point array has shape
``batch + point_shape`` and tangent vectors share the shape of their base
point (ambient representation).  Tangent vectors carry no explicit base; the
base is whatever point array they are paired with in a call.

Grassmann points are stored as ``n x p`` Stiefel representatives ``U`` with
``U^T U = I`` and tangent vectors as horizontal lifts ``D`` with ``U^T D = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CutLocusError, DomainError

# angular distance to the cut locus below which Log is refused
CUT_TOL = 1e-6
_SINC_SERIES = 1e-4


def sinc(x):
    """Unnormalised sinc ``sin(x)/x`` with a series branch near zero."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SINC_SERIES
    safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, np.sin(safe) / safe)


def log_sinc(x):
    """``log(sin(x)/x)``; ``-inf`` where the sinc is non-positive."""
    s = sinc(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, np.log(np.where(s > 0, s, 1.0)), -np.inf)


def _dot(a, b):
    """Inner product over the last axis, keeping it as a singleton (einsum is much faster than sum)."""
    return np.einsum("...i,...i->...", a, b)[..., None]


def _vnorm(a):
    return np.sqrt(_dot(a, a))


def _log_sphere_volume(k):
    # surface area of the unit k-sphere in R^{k+1}
    return math.log(2.0) + 0.5 * (k + 1) * math.log(math.pi) - math.lgamma(0.5 * (k + 1))


class Manifold:
    """Common interface; concrete manifolds override the geometric kernels."""

    dim: int
    point_shape: tuple
    compact: bool = False

    @property
    def point_ndim(self):
        return len(self.point_shape)

    def _axes(self):
        return tuple(range(-self.point_ndim, 0))

    def inner(self, u, v):
        if self.point_ndim == 1:
            return np.einsum("...i,...i->...", u, v)
        return np.einsum("...ij,...ij->...", u, v)

    def norm(self, v):
        return np.sqrt(self.inner(v, v))

    def sq_dist(self, x, y):
        return self.dist(x, y) ** 2

    def batch_shape(self, x):
        x = np.asarray(x)
        return x.shape[: x.ndim - self.point_ndim]

    def expand(self, a):
        """Append singleton axes so a batch-shaped array broadcasts against points."""
        return np.asarray(a)[(...,) + (None,) * self.point_ndim]

    def log_with_sq_dist(self, x, y):
        """``(Log_x y, ok, dist(x, y)^2)`` sharing work where the manifold allows it."""
        v, ok = self.log_masked(x, y)
        return v, ok, self.sq_dist(x, y)

    def log(self, x, y):
        """Riemannian logarithm; raises :class:`CutLocusError` near the cut locus."""
        v, ok = self.log_masked(x, y)
        if not np.all(ok):
            raise CutLocusError("point lies at or near the cut locus of the base point")
        return v

    def log_jac_exp(self, x, v):
        """Log-determinant of the differential of ``Exp_x`` at ``v``."""
        v = np.asarray(v, dtype=float)
        frac = self.cut_fraction(v)
        if np.any(frac > 1.0 + 1e-12):
            raise DomainError("tangent vector lies outside the injectivity domain")
        return self.log_jac(v)

    def cut_time(self, x, xi):
        """Cut time of the unit-speed geodesic from ``x`` with direction ``xi``."""
        xi = np.asarray(xi, dtype=float)
        frac = self.cut_fraction(xi)
        with np.errstate(divide="ignore"):
            return np.where(frac > 0, 1.0 / np.where(frac > 0, frac, 1.0), np.inf)

    def check_point(self, x, tol=1e-9):
        return np.ones(self.batch_shape(x), dtype=bool)

    def cut_fraction(self, v):
        """``|v| / c_x(v/|v|)``: tangent vectors with a value below 1 lie in the injectivity domain."""
        return self.cut_fraction_spectrum(self.singular_values(v))

    def log_jac(self, v):
        """Unchecked log-Jacobian of ``Exp`` at ``v``; ``-inf`` on or past the cut locus."""
        return self.log_jac_spectrum(self.singular_values(v))

    def tangent_gaussian(self, x, scale, rng):
        """Isotropic Gaussian in ``T_x M`` with per-coordinate standard deviation ``scale``."""
        x = np.asarray(x, dtype=float)
        z = rng.standard_normal(x.shape)
        return self.proj(x, self.expand(scale) * z)

    def basis_geodesics(self, x, h):
        """Points ``Exp_x(+h e_k)`` and ``Exp_x(-h e_k)`` for an orthonormal tangent basis ``e``.

        Returns ``(points, basis)`` with shapes ``batch + (2, dim) + point_shape``
        and ``batch + (dim,) + point_shape``; ``h`` has the batch shape.
        """
        x = np.asarray(x, dtype=float)
        basis = self.tangent_basis(x)
        nb = x.ndim - self.point_ndim
        step = self.expand(np.asarray(h)[..., None]) * basis
        xe = np.expand_dims(x, (nb, nb + 1))
        return self.exp(xe, np.stack([step, -step], axis=nb)), basis

    def shrink_uniform(self, x, scale, rng, batch=None):
        """Draws of ``Exp_x(scale * Log_x X0)`` with ``X0`` uniform.

        ``batch`` is the output batch shape; ``x`` must broadcast against it.
        """
        x = np.asarray(x, dtype=float)
        batch = self.batch_shape(x) if batch is None else tuple(batch)
        xb = np.broadcast_to(x, batch + self.point_shape)
        x0 = self.sample_uniform(rng, xb.shape[: xb.ndim - self.point_ndim])
        v, ok = self.log_masked(xb, x0)
        for _ in range(100):
            if np.all(ok):
                break
            fresh = self.sample_uniform(rng, ok.shape)
            x0 = np.where(self.expand(ok), x0, fresh)
            v, ok = self.log_masked(xb, x0)
        else:
            raise CutLocusError("could not draw a base point off the cut locus")
        return self.exp(xb, scale * v)

    def random_unit_tangent(self, x, rng):
        v = self.tangent_gaussian(x, 1.0, rng)
        return v / self.expand(self.norm(v))


@dataclass(frozen=True)
class Euclidean(Manifold):
    """Flat space R^d."""

    d: int
    compact: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("Euclidean dimension must be >= 1")

    @property
    def dim(self):
        return self.d

    @property
    def point_shape(self):
        return (self.d,)

    def proj(self, x, u):
        return np.asarray(u, dtype=float) + 0.0 * np.asarray(x)

    def normalize(self, x):
        return np.asarray(x, dtype=float)

    def exp(self, x, v):
        return np.asarray(x, dtype=float) + v

    def log_masked(self, x, y):
        v = np.asarray(y, dtype=float) - x
        return v, np.ones(self.batch_shape(v), dtype=bool)

    def dist(self, x, y):
        return self.norm(np.asarray(y, dtype=float) - x)

    def cut_fraction(self, v):
        return np.zeros(self.batch_shape(v))

    def log_jac(self, v):
        return np.zeros(self.batch_shape(v))

    def sample_uniform(self, rng, size=()):
        raise DomainError("no uniform distribution on R^d; use a Gaussian base instead")

    def tangent_basis(self, x):
        x = np.asarray(x, dtype=float)
        eye = np.eye(self.d)
        return np.broadcast_to(eye, self.batch_shape(x) + (self.d, self.d)).copy()


@dataclass(frozen=True)
class Sphere(Manifold):
    """Unit sphere S^d embedded in R^{d+1}."""

    d: int
    compact: bool = field(default=True, init=False, repr=False)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("sphere dimension must be >= 1")

    @property
    def dim(self):
        return self.d

    @property
    def point_shape(self):
        return (self.d + 1,)

    @property
    def log_volume(self):
        return _log_sphere_volume(self.d)

    def check_point(self, x, tol=1e-9):
        return np.abs(_vnorm(x)[..., 0] - 1.0) <= tol

    def proj(self, x, u):
        u = np.asarray(u, dtype=float)
        return u - _dot(x, u) * x

    def normalize(self, x):
        x = np.asarray(x, dtype=float)
        return x / _vnorm(x)

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        n = _vnorm(v)
        y = np.cos(n) * x + sinc(n) * v
        return y / _vnorm(y)

    def _angle(self, x, y):
        c = _dot(x, y)
        u = y - c * x
        s = _vnorm(u)
        return np.arctan2(s, c), u, s

    def log_masked(self, x, y):
        return self.log_with_sq_dist(x, y)[:2]

    def log_with_sq_dist(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        theta, u, s = self._angle(x, y)
        # arctan2 keeps full relative accuracy at both ends; u ~ theta * dir when small
        factor = np.where(s > 1e-300, theta / np.where(s > 1e-300, s, 1.0), 1.0)
        theta = theta[..., 0]
        return factor * u, theta < math.pi - CUT_TOL, theta * theta

    def dist(self, x, y):
        theta, _, _ = self._angle(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return theta[..., 0]

    def spectrum(self, x, y):
        """Singular values of ``Log_x y`` (here the single geodesic angle), shape ``batch + (1,)``."""
        return self._angle(np.asarray(x, dtype=float), np.asarray(y, dtype=float))[0]

    def singular_values(self, v):
        return _vnorm(v)

    def cut_fraction_spectrum(self, s):
        return s[..., 0] / math.pi

    def log_jac_spectrum(self, s):
        if self.d == 1:
            return np.zeros(s.shape[:-1])
        return (self.d - 1) * log_sinc(s[..., 0])

    def sample_uniform(self, rng, size=()):
        size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        g = rng.standard_normal(size + (self.d + 1,))
        return g / _vnorm(g)

    def basis_geodesics(self, x, h):
        x = np.asarray(x, dtype=float)
        basis = self.tangent_basis(x)
        nb = x.ndim - 1
        h = np.asarray(h, dtype=float)[..., None, None]
        xe = np.expand_dims(x, nb)
        plus = np.cos(h) * xe + np.sin(h) * basis
        minus = np.cos(h) * xe - np.sin(h) * basis
        return np.stack([plus, minus], axis=nb), basis

    def shrink_uniform(self, x, scale, rng, batch=None):
        x = np.asarray(x, dtype=float)
        batch = self.batch_shape(x) if batch is None else tuple(batch)
        g = rng.standard_normal(batch + self.point_shape)
        c = _dot(g, x)
        u = g - c * x
        s = _vnorm(u)
        # angle of a uniform point seen from x, and its unit direction
        theta = scale * np.arctan2(s, c)
        y = np.cos(theta) * x + np.sin(theta) * u / s
        return y / _vnorm(y)

    def tangent_basis(self, x):
        """Orthonormal basis of ``x^perp`` (shape ``batch + (d, d+1)``) via a Householder map."""
        x = np.asarray(x, dtype=float)
        e0 = np.zeros(self.d + 1)
        e0[0] = 1.0
        sign = np.where(x[..., :1] >= 0, 1.0, -1.0)
        w = x + sign * e0
        w = w / _vnorm(w)
        h = np.eye(self.d + 1) - 2.0 * w[..., :, None] * w[..., None, :]
        # columns 1..d of the reflector are orthogonal to its first column (= -sign * x)
        return np.swapaxes(h[..., :, 1:], -1, -2)


@dataclass(frozen=True)
class Grassmann(Manifold):
    """Grassmann manifold Gr(n, p) with Stiefel representatives.

    Exp and Log follow the SVD-based algorithms of Bendokat, Zimmermann and
    Absil (2024); principal angles are recovered with ``arctan2`` of sines and
    cosines so that accuracy holds near both 0 and pi/2.
    """

    n: int
    p: int
    compact: bool = field(default=True, init=False, repr=False)

    def __post_init__(self):
        if not self.n > self.p >= 1:
            raise ValueError("Grassmann manifold requires n > p >= 1")

    @property
    def dim(self):
        return self.p * (self.n - self.p)

    @property
    def point_shape(self):
        return (self.n, self.p)

    @property
    def log_volume(self):
        top = sum(_log_sphere_volume(i - 1) for i in range(self.n - self.p + 1, self.n + 1))
        fibre = sum(_log_sphere_volume(i - 1) for i in range(1, self.p + 1))
        return top - fibre

    def check_point(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        gram = np.swapaxes(x, -1, -2) @ x
        return np.max(np.abs(gram - np.eye(self.p)), axis=(-1, -2)) <= tol

    def proj(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return u - x @ (np.swapaxes(x, -1, -2) @ u)

    def normalize(self, x):
        q, r = np.linalg.qr(np.asarray(x, dtype=float))
        sign = np.where(np.diagonal(r, axis1=-2, axis2=-1) < 0, -1.0, 1.0)
        return q * sign[..., None, :]

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        q, s, vt = np.linalg.svd(np.asarray(v, dtype=float), full_matrices=False)
        y = (x @ np.swapaxes(vt, -1, -2)) * np.cos(s)[..., None, :] + q * np.sin(s)[..., None, :]
        return self.normalize(y @ vt)

    def _principal_angles(self, x, y):
        """Principal angles between span(x) and span(y), ascending."""
        cos = np.linalg.svd(np.swapaxes(y, -1, -2) @ x, compute_uv=False)
        resid = y - x @ (np.swapaxes(x, -1, -2) @ y)
        sin = np.linalg.svd(resid, compute_uv=False)[..., ::-1]
        return np.arctan2(sin, cos)

    def log_masked(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xt = np.swapaxes(x, -1, -2)
        u, _, vh = np.linalg.svd(np.swapaxes(y, -1, -2) @ x)
        ystar = y @ (u @ vh)  # Procrustes-aligned representative
        a = xt @ ystar
        m = ystar - x @ a
        qh, sh, rh = np.linalg.svd(m, full_matrices=False)
        cos = np.einsum("...ij,...jk,...ik->...i", rh, a, rh)
        theta = np.arctan2(sh, cos)
        ok = np.max(theta, axis=-1) < 0.5 * math.pi - CUT_TOL
        theta = np.clip(theta, 0.0, 0.5 * math.pi - 1e-9)
        v = (qh * theta[..., None, :]) @ rh
        return v, ok

    def dist(self, x, y):
        theta = self._principal_angles(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return np.sqrt(np.sum(theta * theta, axis=-1))

    def spectrum(self, x, y):
        """Singular values of ``Log_x y``, i.e. the principal angles in descending order."""
        return self._principal_angles(np.asarray(x, dtype=float), np.asarray(y, dtype=float))[..., ::-1]

    def singular_values(self, v):
        return np.linalg.svd(np.asarray(v, dtype=float), compute_uv=False)

    def cut_fraction_spectrum(self, s):
        return s[..., 0] / (0.5 * math.pi)

    def log_jac_spectrum(self, s):
        q = min(self.p, self.n - self.p)
        s = s[..., :q]
        total = abs(self.n - 2 * self.p) * np.sum(log_sinc(s), axis=-1)
        for i in range(q):
            for j in range(i + 1, q):
                total = total + log_sinc(s[..., i] + s[..., j]) + log_sinc(s[..., i] - s[..., j])
        return total

    def sample_uniform(self, rng, size=()):
        size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        return self.normalize(rng.standard_normal(size + (self.n, self.p)))

    def complement(self, x):
        """Orthonormal completion ``U_perp`` of shape ``batch + (n, n-p)``."""
        q, _ = np.linalg.qr(np.asarray(x, dtype=float), mode="complete")
        return q[..., :, self.p:]

    def tangent_basis(self, x):
        """Orthonormal horizontal basis at ``x``, shape ``batch + (d, n, p)``."""
        perp = self.complement(x)
        eye = np.eye(self.p)
        # E_{a,b} = perp[:, a] e_b^T
        basis = np.einsum("...ia,bc->...abic", perp, eye)
        return basis.reshape(basis.shape[:-4] + (self.dim, self.n, self.p))

    def basis_geodesics(self, x, h):
        # Exp along perp[:, a] e_b^T only rotates column b towards perp[:, a]
        x = np.asarray(x, dtype=float)
        perp = self.complement(x)
        nb = x.ndim - 2
        k = self.n - self.p
        h = np.asarray(h, dtype=float)[..., None, None, None]
        xcols = np.swapaxes(x, -1, -2)[..., None, :, :]
        pcols = np.swapaxes(perp, -1, -2)[..., :, None, :]
        sel = np.eye(self.p)[:, None, :]
        xe = x[..., None, None, :, :]
        out = []
        for sign in (1.0, -1.0):
            col = np.cos(h) * xcols + sign * np.sin(h) * pcols
            pts = xe * (1.0 - sel) + col[..., None] * sel
            out.append(pts.reshape(pts.shape[:nb] + (k * self.p, self.n, self.p)))
        return np.stack(out, axis=nb), self.tangent_basis(x)

    def shrink_uniform(self, x, scale, rng, batch=None):
        x = np.asarray(x, dtype=float)
        batch = self.batch_shape(x) if batch is None else tuple(batch)
        perp = self.complement(x)
        a = rng.standard_normal(batch + (self.p, self.p))
        c = rng.standard_normal(batch + (self.n - self.p, self.p))
        # span(x a + perp c) is uniform; relative to x its principal angles are
        # arctan of the singular values of c a^{-1}, found here from a p x p Gram matrix
        ratio = np.swapaxes(np.linalg.solve(np.swapaxes(a, -1, -2), np.swapaxes(c, -1, -2)), -1, -2)
        lam, r = np.linalg.eigh(np.swapaxes(ratio, -1, -2) @ ratio)
        s = np.sqrt(np.clip(lam, 0.0, None))
        theta = scale * np.arctan(s)
        tiny = s < 1e-8
        gain = np.where(tiny, scale, np.sin(theta) / np.where(tiny, 1.0, s))
        rt = np.swapaxes(r, -1, -2)
        y = (x @ r) * np.cos(theta)[..., None, :] @ rt + (perp @ (ratio @ r)) * gain[..., None, :] @ rt
        # an ill-conditioned draw of a can cost a few digits of orthonormality
        return self.normalize(y)

    def sq_dist(self, x, y):
        """Squared geodesic distance from the cosines of the principal angles.

        Cheaper than :meth:`dist`; the squared angles keep full absolute accuracy
        even though small angles themselves are resolved only to ~1e-8.
        """
        g = np.swapaxes(np.asarray(y, dtype=float), -1, -2) @ np.asarray(x, dtype=float)
        cos2 = np.linalg.eigvalsh(np.swapaxes(g, -1, -2) @ g)
        theta = np.arccos(np.sqrt(np.clip(cos2, 0.0, 1.0)))
        return np.sum(theta * theta, axis=-1)
