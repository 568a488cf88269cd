import math

import numpy as np
import pytest
from _oracles import angle, gaussian_posterior, geodesic_fd_grad
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from frips.errors import CapabilityError, CutLocusError, DomainError
from frips.geometry import Euclidean, Grassmann, Sphere
from frips.interpolant import (
    GaussianBase,
    InterpolantCtx,
    UniformBase,
    grad_x1_log_posterior,
    grad_xt_log_p_t_given_1,
    in_support,
    log_p_and_grad_x1,
    log_p_t_given_1,
    log_posterior,
    psi,
    psi_inv,
    sample_nu,
)
from frips.targets import RiemannianMoG

seeds = st.integers(min_value=0, max_value=2**32 - 1)
times = st.floats(min_value=0.05, max_value=0.95)

S2 = InterpolantCtx(Sphere(2))


class Flat:
    """Constant target."""

    has_grad = True

    def __init__(self, m):
        self.manifold = m

    def log_q1(self, x):
        return np.zeros(self.manifold.batch_shape(x))

    def grad_log_q1(self, x):
        return np.zeros_like(x)


def test_ctx_defaults_and_invariants():
    assert isinstance(InterpolantCtx(Sphere(3)).base, UniformBase)
    assert isinstance(InterpolantCtx(Euclidean(3)).base, GaussianBase)
    with pytest.raises(ValueError):
        InterpolantCtx(Euclidean(2), UniformBase())
    with pytest.raises(ValueError):
        InterpolantCtx(Sphere(2), GaussianBase())
    with pytest.raises(ValueError):
        GaussianBase(0.0)


# psi / psi_inv ------------------------------------------------------------------


def test_psi_examples():
    x0, x1 = np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    np.testing.assert_allclose(psi(S2, 0.0, x0, x1), x0, atol=1e-15)
    np.testing.assert_allclose(psi(S2, 1.0, x0, x1), x1, atol=1e-15)
    np.testing.assert_allclose(psi(S2, 0.5, x0, x1), [math.sqrt(0.5), math.sqrt(0.5), 0], atol=1e-15)
    e = InterpolantCtx(Euclidean(3))
    a, b = np.array([1.0, -2, 0.5]), np.array([0.3, 4, -1])
    np.testing.assert_allclose(psi(e, 0.3, a, b), 0.3 * b + 0.7 * a)
    np.testing.assert_allclose(psi_inv(e, 0.3, a, b), (a - 0.3 * b) / 0.7)
    np.testing.assert_allclose(psi_inv(S2, 0.0, x0, x1), x0, atol=1e-15)
    with pytest.raises(CutLocusError):
        psi(S2, 0.5, -x1, x1)
    with pytest.raises(DomainError):
        psi_inv(S2, 1.0, x0, x1)


def test_psi_round_trip_sphere(rng):
    m = Sphere(2)
    x1 = m.sample_uniform(rng, 1000)
    x0 = m.sample_uniform(rng, 1000)
    xt = psi(S2, 0.5, x0, x1)
    assert np.all(in_support(S2, 0.5, xt, x1))
    np.testing.assert_allclose(psi(S2, 0.5, psi_inv(S2, 0.5, xt, x1), x1), xt, atol=1e-8)


@pytest.mark.parametrize("m", [Sphere(5), Grassmann(5, 2)], ids=str)
@given(seed=seeds, t=times)
def test_psi_round_trip_property(m, seed, t):
    rng = np.random.default_rng(seed)
    ctx = InterpolantCtx(m)
    x1, x0 = m.sample_uniform(rng, 8), m.sample_uniform(rng, 8)
    xt = psi(ctx, t, x0, x1)
    assert np.all(in_support(ctx, t, xt, x1))
    np.testing.assert_allclose(m.dist(psi_inv(ctx, t, xt, x1), x0), 0.0, atol=1e-6)


# support ------------------------------------------------------------------------


def test_in_support_examples():
    x1, y = np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    assert not in_support(S2, 0.5, y, x1)
    assert in_support(S2, 0.0, y, x1)
    assert in_support(S2, 0.49, y, x1)
    e = InterpolantCtx(Euclidean(2))
    assert in_support(e, 0.9, np.array([100.0, 0]), np.zeros(2))


@pytest.mark.parametrize("ctx", [S2, InterpolantCtx(Grassmann(4, 2))], ids=["sphere", "grassmann"])
@given(seed=seeds, t=times)
def test_support_semantics(ctx, seed, t):
    rng = np.random.default_rng(seed)
    m = ctx.manifold
    x1, xt = m.sample_uniform(rng, 64), m.sample_uniform(rng, 64)
    lp = log_p_t_given_1(ctx, t, xt, x1)
    np.testing.assert_array_equal(np.isneginf(lp), ~in_support(ctx, t, xt, x1))
    assert np.all(np.isfinite(lp[in_support(ctx, t, xt, x1)]))


# conditional density ------------------------------------------------------------


def test_log_p_examples():
    x1 = np.array([0.0, 0, 1])
    xt = np.array([0.3, 0.4, 0.5])
    xt = xt / np.linalg.norm(xt)
    assert log_p_t_given_1(S2, 0.0, xt, x1) == pytest.approx(-math.log(4 * math.pi))
    th = math.pi / 4
    y = np.array([math.sin(th), 0, math.cos(th)])
    assert log_p_t_given_1(S2, 0.5, y, x1) == pytest.approx(-math.log(4 * math.pi) + math.log(2 * math.sqrt(2)))
    e1 = InterpolantCtx(Euclidean(1))
    assert log_p_t_given_1(e1, 0.5, np.array([0.3]), np.array([0.0])) == pytest.approx(stats.norm(0, 0.5).logpdf(0.3))


def _mc_mass(m, t, n, rng):
    ctx = InterpolantCtx(m)
    x1 = m.sample_uniform(rng)
    pts = m.sample_uniform(rng, n)
    return np.exp(m.log_volume) * np.mean(np.exp(log_p_t_given_1(ctx, t, pts, x1)))


@pytest.mark.parametrize("m", [Sphere(2), Grassmann(3, 1)], ids=str)
@pytest.mark.parametrize("t", [0.3, 0.7])
def test_normalisation_monte_carlo(m, t, rng):
    assert _mc_mass(m, t, 100_000, rng) == pytest.approx(1.0, abs=0.02)


def test_normalisation_grassmann_4_2(rng):
    # the support shrinks like (1 - t)^4 of the volume, hence more points at t = 0.7
    m = Grassmann(4, 2)
    assert _mc_mass(m, 0.3, 100_000, rng) == pytest.approx(1.0, abs=0.02)
    assert _mc_mass(m, 0.7, 1_000_000, rng) == pytest.approx(1.0, abs=0.03)


def test_normalisation_euclidean():
    ctx = InterpolantCtx(Euclidean(2), GaussianBase(1.7))
    g = np.linspace(-12, 12, 801)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx, yy], axis=-1)
    dens = np.exp(log_p_t_given_1(ctx, 0.4, pts, np.array([0.5, -1.0])))
    assert integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g) == pytest.approx(1.0, abs=1e-6)


# scores ---------------------------------------------------------------------------


def test_euclidean_score_example():
    ctx = InterpolantCtx(Euclidean(2))
    np.testing.assert_allclose(grad_xt_log_p_t_given_1(ctx, 0.5, np.array([1.0, 0]), np.zeros(2)), [-4, 0])


def test_score_outside_support_raises():
    x1, y = np.array([1.0, 0, 0]), np.array([-0.9, math.sqrt(0.19), 0])
    with pytest.raises(DomainError):
        grad_xt_log_p_t_given_1(S2, 0.5, y, x1)


def _pairs_in_support(ctx, t, rng, n):
    m = ctx.manifold
    x1 = m.sample_uniform(rng, n)
    return psi(ctx, t, m.sample_uniform(rng, n), x1), x1


@pytest.mark.parametrize("d", [2, 5, 16])
def test_sphere_scores_match_finite_differences(d, rng):
    m = Sphere(d)
    ctx = InterpolantCtx(m)
    for t in (0.2, 0.5, 0.8):
        xt, x1 = _pairs_in_support(ctx, t, rng, 30)
        for a, b in zip(xt, x1):
            if m.dist(a, b) / math.pi > 0.97 * (1 - t) or m.dist(a, b) < 1e-3:
                continue
            g = grad_xt_log_p_t_given_1(ctx, t, a, b)
            fd = geodesic_fd_grad(m, lambda p: log_p_t_given_1(ctx, t, p, b), a)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * max(1.0, np.linalg.norm(fd)))
            assert abs(a @ g) < 1e-10
            g1 = grad_x1_log_posterior(ctx, t, a, b, Flat(m))
            fd1 = geodesic_fd_grad(m, lambda p: log_p_t_given_1(ctx, t, a, p), b)
            np.testing.assert_allclose(g1, fd1, rtol=1e-5, atol=1e-5 * max(1.0, np.linalg.norm(fd1)))
            assert abs(b @ g1) < 1e-10


def test_posterior_score_with_target_matches_fd(rng):
    m = Sphere(3)
    ctx = InterpolantCtx(m)
    mu = m.sample_uniform(rng, 2)
    tgt = RiemannianMoG(m, mu, np.array([0.4, 0.6]), np.array([2.0, 1.0]))
    xt, x1 = _pairs_in_support(ctx, 0.4, rng, 100)
    for a, b in zip(xt, x1):
        if m.dist(a, b) / math.pi > 0.97 * 0.6:
            continue
        g = grad_x1_log_posterior(ctx, 0.4, a, b, tgt)
        fd = geodesic_fd_grad(m, lambda p: log_posterior(ctx, 0.4, a, p, tgt), b)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * max(1.0, np.linalg.norm(fd)))


def test_euclidean_posterior_score(rng):
    ctx = InterpolantCtx(Euclidean(3), GaussianBase(0.8))
    tgt = RiemannianMoG(Euclidean(3), np.array([[1.0, 0, -1]]), np.array([0.7]), np.array([1.0]))
    for _ in range(100):
        t = rng.uniform(0.05, 0.95)
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        g = grad_x1_log_posterior(ctx, t, a, b, tgt)
        fd = geodesic_fd_grad(ctx.manifold, lambda p: log_posterior(ctx, t, a, p, tgt), b)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_grassmann_scores_match_finite_differences(rng):
    m = Grassmann(4, 2)
    ctx = InterpolantCtx(m)
    xt, x1 = _pairs_in_support(ctx, 0.4, rng, 10)
    for a, b in zip(xt, x1):
        if m.cut_fraction_spectrum(m.spectrum(b, a)) > 0.9 * 0.6:
            continue
        g = grad_xt_log_p_t_given_1(ctx, 0.4, a, b)
        fd = geodesic_fd_grad(m, lambda p: log_p_t_given_1(ctx, 0.4, p, b), a, h=1e-4)
        np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-4)
        assert np.max(np.abs(a.T @ g)) < 1e-10


def test_joint_value_and_grad_agree(rng):
    m = Sphere(4)
    ctx = InterpolantCtx(m)
    xt, x1 = _pairs_in_support(ctx, 0.6, rng, 200)
    lp, g = log_p_and_grad_x1(ctx, 0.6, xt, x1)
    np.testing.assert_allclose(lp, log_p_t_given_1(ctx, 0.6, xt, x1), rtol=1e-12)
    np.testing.assert_allclose(g, grad_x1_log_posterior(ctx, 0.6, xt, x1, Flat(m)), atol=1e-12)


def test_grad_needs_target_gradient():
    class NoGrad(Flat):
        has_grad = False

    with pytest.raises(CapabilityError):
        grad_x1_log_posterior(S2, 0.3, np.array([1.0, 0, 0]), np.array([0.0, 1, 0]), NoGrad(Sphere(2)))


# posterior density ----------------------------------------------------------------


def test_log_posterior_constant_target(rng):
    m = Sphere(2)
    xt, x1 = m.sample_uniform(rng, 50), m.sample_uniform(rng, 50)
    np.testing.assert_array_equal(log_posterior(S2, 0.3, xt, x1, Flat(m)), log_p_t_given_1(S2, 0.3, xt, x1))


def test_log_posterior_at_time_zero_is_target(rng):
    m = Sphere(2)
    tgt = RiemannianMoG(m, np.array([[0.0, 0, 1]]), np.array([0.5]), np.array([1.0]))
    xt = m.sample_uniform(rng)
    x1 = m.sample_uniform(rng, 200)
    x1 = x1[m.dist(xt, x1) < math.pi - 1e-6]
    diff = log_posterior(S2, 0.0, xt, x1, tgt) - tgt.log_q1(x1)
    np.testing.assert_allclose(diff, diff[0], atol=1e-10)


def test_log_posterior_euclidean_conjugate():
    ctx = InterpolantCtx(Euclidean(1))
    prior_mean, prior_sd, t, xt = 0.7, 0.4, 0.6, np.array([0.2])
    tgt = RiemannianMoG(Euclidean(1), np.array([[prior_mean]]), np.array([prior_sd]), np.array([1.0]))
    grid = np.linspace(-1, 2, 301)[:, None]
    mean, sd = gaussian_posterior(prior_mean, prior_sd, t, xt)
    diff = log_posterior(ctx, t, xt, grid, tgt) - stats.norm(mean[0], sd).logpdf(grid[:, 0])
    np.testing.assert_allclose(diff, diff[0], atol=1e-8)


# exact proposal sampling ----------------------------------------------------------


def test_sample_nu_sphere_angle_law(rng):
    t = 0.5
    xt = np.array([0.0, 0.0, 1.0])
    draws = sample_nu(S2, t, np.broadcast_to(xt, (100_000, 3)), rng)
    th = angle(draws, xt)
    assert np.all(th < (1 - t) * math.pi)
    hi = (1 - t) * math.pi
    dens = lambda a: math.sin(a / (1 - t)) / (1 - t)  # noqa: E731
    z = integrate.quad(dens, 0, hi)[0]
    grid = np.linspace(0, hi, 2001)
    cdf = np.array([0.0] + [integrate.quad(dens, grid[i], grid[i + 1])[0] for i in range(2000)]).cumsum() / z
    ks = stats.kstest(th, lambda a: np.interp(a, grid, cdf)).statistic
    assert ks < 0.006


def test_sample_nu_support_property(rng):
    m = Sphere(4)
    ctx = InterpolantCtx(m)
    for t in (0.1, 0.5, 0.95):
        xt = m.sample_uniform(rng, 2000)
        x1 = sample_nu(ctx, t, xt, rng)
        assert np.all(in_support(ctx, t, xt, x1))


def test_sample_nu_concentrates(rng):
    m = Sphere(3)
    ctx = InterpolantCtx(m)
    xt = np.broadcast_to(m.sample_uniform(rng), (20_000, 4))
    q = [np.quantile(m.dist(xt, sample_nu(ctx, t, xt, rng)), 0.99) for t in (0.5, 0.8, 0.95)]
    assert q[0] > q[1] > q[2]
    assert q[2] < 0.05 * math.pi


def test_sample_nu_euclidean(rng):
    ctx = InterpolantCtx(Euclidean(1))
    n = 100_000
    draws = sample_nu(ctx, 0.5, np.array([1.0]), rng, n=n)
    assert draws.shape == (n, 1)
    assert abs(draws.mean() - 2.0) < 3 / math.sqrt(n)
    assert draws.std() == pytest.approx(1.0, rel=0.02)
    with pytest.raises(DomainError):
        sample_nu(ctx, 0.0, np.array([1.0]), rng)


def test_sample_nu_grassmann_support(rng):
    m = Grassmann(5, 2)
    ctx = InterpolantCtx(m)
    xt = m.sample_uniform(rng, 500)
    x1 = sample_nu(ctx, 0.3, xt, rng)
    assert np.all(in_support(ctx, 0.3, xt, x1))
