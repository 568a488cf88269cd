import math

import numpy as np
import pytest
from _oracles import angle, gaussian_posterior
from scipy import stats

from frips.engine import (
    FripsConfig,
    integrate,
    mode_blind_start,
    noised_samples,
    pseudo_imh_init,
    return_accuracy,
    rla_init,
    run,
    score,
    score_from_ensemble,
    velocity,
    velocity_from_ensemble,
)
from frips.errors import CapabilityError
from frips.geometry import Euclidean, Grassmann, Sphere
from frips.interpolant import GaussianBase, InterpolantCtx, grad_xt_log_p_t_given_1
from frips.posterior import BackboneConfig, GaussianConjugatePosterior, WeightedEnsemble
from frips.targets import RiemannianMoG, ground_truth_sampler

S2 = InterpolantCtx(Sphere(2))


class Flat:
    has_grad = True
    upper_bound_log = 0.0

    def __init__(self, m):
        self.manifold = m

    def log_q1(self, x):
        return np.zeros(self.manifold.batch_shape(x))

    def value_and_grad(self, x):
        return self.log_q1(x), np.zeros_like(np.asarray(x, dtype=float))


def atom(x1, batch):
    x1 = np.asarray(x1, dtype=float)
    parts = np.broadcast_to(x1, (batch, 1) + x1.shape[-1:]).copy()
    return WeightedEnsemble(parts, np.ones((batch, 1)), np.ones(batch))


def gauss_setup(d=2, mean=1.0, s=0.5, sigma0=1.0, n_samples=4096):
    ctx = InterpolantCtx(Euclidean(d), GaussianBase(sigma0))
    m = np.full(d, mean)
    tgt = RiemannianMoG(Euclidean(d), m[None], np.array([s]), np.array([1.0]))
    return ctx, tgt, m, GaussianConjugatePosterior(m, s, sigma0, n_samples)


def marginal(t, m, s, sigma0=1.0):
    return t * m, math.sqrt(t**2 * s**2 + (1 - t) ** 2 * sigma0**2)


def test_config_grid_and_validation():
    cfg = FripsConfig(t0=0.2)
    g = cfg.grid()
    assert g.size == 129 and g[0] == 0.2 and g[-1] == 0.99
    assert np.all(np.diff(g) > 0)
    for bad in (dict(t0=1.0), dict(t0=0.5, t_end=0.4), dict(t0=0.1, n_steps=0), dict(t0=0.1, init="euler")):
        with pytest.raises(ValueError):
            FripsConfig(**bad)
    with pytest.raises(ValueError):
        FripsConfig(t0=0.1, init_noise=0.0)


# velocity and score --------------------------------------------------------------------


def test_velocity_single_atom(rng):
    m = Sphere(3)
    xt, x1 = m.sample_uniform(rng, 5), m.sample_uniform(rng, 5)
    ctx = InterpolantCtx(m)
    u, drops = velocity_from_ensemble(ctx, 0.4, xt, WeightedEnsemble(x1[:, None], np.ones((5, 1)), np.ones(5)))
    np.testing.assert_allclose(u, m.log(xt, x1) / 0.6, atol=1e-12)
    assert drops == 0
    # an antipodal particle sits on the cut locus and is dropped
    u, drops = velocity_from_ensemble(ctx, 0.4, xt[:1], WeightedEnsemble(-xt[:1, None], np.ones((1, 1)), np.ones(1)))
    assert drops == 1 and np.all(u == 0)


def test_velocity_uniform_target_vanishes(rng):
    m = Sphere(4)
    ctx = InterpolantCtx(m)
    xt = m.sample_uniform(rng, 20)
    n, t = 4096, 0.5
    cfg = BackboneConfig(kind="is", n_samples=n)
    u, _, ens = velocity(ctx, t, xt, Flat(m), cfg, None, rng)
    mean_dist = np.mean(m.dist(xt[:, None], ens.particles), axis=-1)
    assert np.all(m.norm(u) <= 5 * mean_dist / ((1 - t) * math.sqrt(n)))
    s, _, _ = score(ctx, t, xt, Flat(m), cfg, None, rng)
    scale = np.mean(np.linalg.norm(grad_xt_log_p_t_given_1(ctx, t, xt[:, None], ens.particles), axis=-1), axis=-1)
    assert np.all(m.norm(s) <= 5 * scale / math.sqrt(n))


def test_velocity_euclidean_conjugate(rng):
    ctx, tgt, mean, post = gauss_setup(n_samples=20_000)
    t = 0.6
    xt = rng.standard_normal((10, 2))
    u, _, _ = velocity(ctx, t, xt, tgt, None, None, rng, posterior=post)
    m_post, sd = gaussian_posterior(mean, 0.5, t, xt)
    np.testing.assert_allclose(u, (m_post - xt) / (1 - t), atol=4 * sd / math.sqrt(20_000) / (1 - t))


def test_score_euclidean_conjugate(rng):
    ctx, tgt, mean, post = gauss_setup(n_samples=20_000)
    t = 0.6
    xt = rng.standard_normal((10, 2))
    s, _, _ = score(ctx, t, xt, tgt, None, None, rng, posterior=post)
    mu, sd = marginal(t, mean, 0.5)
    exact = -(xt - mu) / sd**2
    # Tweedie sum: each term is (t x1 - xt) / (1 - t)^2, so the MC error is t sd_post / ((1 - t)^2 sqrt n)
    _, sd_post = gaussian_posterior(mean, 0.5, t, xt)
    np.testing.assert_allclose(s, exact, atol=4 * t * sd_post / ((1 - t) ** 2 * math.sqrt(20_000)))


def test_score_single_atom_and_grassmann(rng):
    m = Sphere(3)
    ctx = InterpolantCtx(m)
    x1 = m.sample_uniform(rng)
    xt = m.exp(x1, 0.3 * m.random_unit_tangent(x1, rng))
    s = score_from_ensemble(ctx, 0.5, xt[None], atom(x1, 1))
    np.testing.assert_allclose(s[0], grad_xt_log_p_t_given_1(ctx, 0.5, xt, x1), atol=1e-12)
    g = Grassmann(4, 2)
    with pytest.raises(CapabilityError):
        score(InterpolantCtx(g), 0.5, g.sample_uniform(rng, 2), Flat(g), BackboneConfig(kind="is"), None, rng)


def test_velocity_norm_bound(rng):
    m = Sphere(3)
    ctx = InterpolantCtx(m)
    tgt = RiemannianMoG(m, m.sample_uniform(rng, 2), np.array([0.3, 0.3]), np.array([1.0, 1.0]))
    xt = m.sample_uniform(rng, 50)
    u, _, ens = velocity(ctx, 0.3, xt, tgt, BackboneConfig(kind="is", n_samples=64), None, rng)
    far = np.max(m.dist(xt[:, None], ens.particles), axis=-1)
    assert np.all(m.norm(u) <= far / 0.7 + 1e-12)


# initialisers ---------------------------------------------------------------------------


def test_rla_trivial_limits(rng):
    ctx, tgt, _, post = gauss_setup()
    start = rng.standard_normal((7, 2))
    same, _ = rla_init(ctx, FripsConfig(t0=0.3, init_steps=0), tgt, start, rng, posterior=post)
    np.testing.assert_array_equal(same, start)
    tiny, _ = rla_init(ctx, FripsConfig(t0=0.3, init_steps=5, init_step_size=1e-20), tgt, start, rng, posterior=post)
    np.testing.assert_allclose(tiny, start, atol=1e-8)


def test_rla_stationary_law_euclidean(rng):
    # exact scores from the conjugate posterior: the Langevin chain should sample pi_t0
    t0 = 0.4
    ctx, tgt, mean, post = gauss_setup(d=1, n_samples=64)
    mu, sd = marginal(t0, mean, 0.5)
    start = rng.standard_normal((4000, 1))
    cfg = FripsConfig(t0=t0, init_steps=400, init_step_size=0.01)
    x, _ = rla_init(ctx, cfg, tgt, start, rng, posterior=post)
    assert abs(x.mean() - mu[0]) < 3 * sd / math.sqrt(4000) + 0.01
    assert x.std() == pytest.approx(sd, rel=0.05)
    # the unit noise scale shrinks the spread by about 1/sqrt(2)
    half = FripsConfig(t0=t0, init_steps=400, init_step_size=0.01, init_noise=1.0)
    y, _ = rla_init(ctx, half, tgt, start, rng, posterior=post)
    assert y.std() == pytest.approx(sd / math.sqrt(2), rel=0.05)


def test_imh_trivial_limits(rng):
    m = Sphere(2)
    start = m.sample_uniform(rng, 10)
    same, _ = pseudo_imh_init(S2, FripsConfig(t0=0.3, init="imh", init_steps=0), Flat(m), start, rng)
    np.testing.assert_array_equal(same, start)
    with pytest.raises(CapabilityError):
        pseudo_imh_init(InterpolantCtx(Euclidean(2)), FripsConfig(t0=0.3, init="imh"), Flat(Euclidean(2)), start, rng)


def test_imh_uniform_target_accepts(rng):
    m = Sphere(2)
    cfg = FripsConfig(t0=0.5, init="imh", init_steps=20, imh_batch=512)
    _, rate = pseudo_imh_init(S2, cfg, Flat(m), m.sample_uniform(rng, 200), rng)
    assert rate >= 0.9


def test_imh_matches_noised_ground_truth(rng):
    # exact draws of pi_t0: noise ground-truth target samples forward with psi
    m = Sphere(2)
    e = np.array([0.0, 0.0, 1.0])
    tgt = RiemannianMoG(m, np.stack([e, -e]), np.full(2, 0.4), np.array([2 / 3, 1 / 3]))
    t0, n = 0.8, 10_000
    x1, _ = ground_truth_sampler(tgt, rng, 200_000)
    exact = noised_samples(S2, t0, x1, rng)
    cfg = FripsConfig(t0=t0, init="imh", init_steps=30, imh_batch=128)
    x, _ = pseudo_imh_init(S2, cfg, tgt, m.sample_uniform(rng, n), rng)
    edges = np.linspace(0, math.pi, 9)
    h1 = np.histogram(angle(x, e), edges)[0] / n
    h2 = np.histogram(angle(exact, e), edges)[0] / exact.shape[0]
    assert 0.5 * np.abs(h1 - h2).sum() < 0.08


def test_mode_blind_start(rng):
    m = Sphere(3)
    ctx = InterpolantCtx(m)
    blind = m.sample_uniform(rng, 500)
    np.testing.assert_array_equal(mode_blind_start(ctx, 1.0, blind, rng), blind)
    out = mode_blind_start(ctx, 0.3, blind, rng)
    assert np.all(m.dist(out, blind) <= 0.7 * math.pi + 1e-12)
    assert np.all(m.check_point(out))
    e = InterpolantCtx(Euclidean(2))
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    np.testing.assert_allclose(mode_blind_start(e, 0.0, np.ones((4, 2)), r1), e.sample_base(r2, 4))


# the Euler loop -----------------------------------------------------------------------


def test_zero_velocity_single_step(rng):
    m = Sphere(3)
    ctx = InterpolantCtx(m)
    x = m.sample_uniform(rng, 20)
    cfg = FripsConfig(t0=0.5, n_steps=1, backbone=BackboneConfig(kind="is", n_samples=8192))
    out, traj = integrate(ctx, cfg, Flat(m), x, rng)
    assert np.all(m.dist(out, x) < 0.05)
    assert traj.states.shape == (2, 20, 4)


def test_euclidean_end_to_end(rng):
    ctx, tgt, mean, post = gauss_setup(d=2, n_samples=64)
    cfg = FripsConfig(t0=0.3, init_steps=64, init_step_size=0.05)
    x, traj = run(ctx, cfg, tgt, 4096, rng, posterior=post, keep_states=False)
    assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * 0.5 / 64 + 0.01)
    np.testing.assert_allclose(x.var(axis=0), 0.25, rtol=0.1)
    assert traj.drop_rate == 0.0


def test_marginals_preserved_with_exact_posterior(rng):
    ctx, tgt, mean, post = gauss_setup(d=2, n_samples=64)
    t0 = 0.1
    mu0, sd0 = marginal(t0, mean, 0.5)
    x = mu0 + sd0 * rng.standard_normal((4096, 2))
    cfg = FripsConfig(t0=t0, n_steps=512, init="none")
    _, traj = integrate(ctx, cfg, tgt, x, rng, posterior=post)
    for k in (128, 256, 512):
        mu, sd = marginal(traj.times[k], mean, 0.5)
        for j in range(2):
            assert stats.kstest(traj.states[k][:, j], stats.norm(mu[j], sd).cdf).statistic < 0.03


def test_points_stay_valid_and_determinism():
    m = Sphere(4)
    ctx = InterpolantCtx(m)
    e = np.zeros(5)
    e[0] = 1.0
    tgt = RiemannianMoG(m, np.stack([e, -e]), np.full(2, math.pi / 10), np.array([2 / 3, 1 / 3]))
    cfg = FripsConfig(
        t0=0.6, n_steps=16, init_steps=4, init_posterior_steps=8, backbone=BackboneConfig(n_chains=4, n_steps=8, n_keep=2)
    )
    a, ta = run(ctx, cfg, tgt, 32, np.random.default_rng(11))
    b, tb = run(ctx, cfg, tgt, 32, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ta.states, tb.states)
    assert np.all(m.check_point(ta.states.reshape(-1, 5)))


def test_abort_retry_and_resample(rng):
    m = Sphere(2)
    calls = {"n": 0}

    def flaky(ctx, t, xt, rng, warm=None):
        calls["n"] += 1
        n = xt.shape[0]
        parts = np.broadcast_to(xt[:, None], (n, 4, 3)).copy()
        ens = WeightedEnsemble(parts, np.full((n, 4), 0.25), np.full(n, 4.0))
        # the first trajectory of the first pass always fails
        ens.degenerate = np.zeros(n, dtype=bool)
        if calls["n"] <= 2 and n in (3, 1):
            ens.degenerate[0] = True
        return ens, None

    cfg = FripsConfig(t0=0.5, n_steps=2, init="none")
    x, traj = run(S2, cfg, Flat(m), 3, rng, posterior=flaky)
    assert traj.first_pass_drops == 1
    assert traj.drop_rate == pytest.approx(1 / 3)
    assert not traj.aborted.any()
    assert np.all(m.check_point(x))


# return accuracy ------------------------------------------------------------------------


def _sphere4():
    m = Sphere(4)
    e = np.zeros(5)
    e[0] = 1.0
    return InterpolantCtx(m), RiemannianMoG(m, np.stack([e, -e]), np.full(2, math.pi / 10), np.array([0.5, 0.5]))


def test_return_accuracy_regimes(rng):
    ctx, tgt = _sphere4()
    blind = tgt.sample_component(0, rng, 200)
    cfg = FripsConfig(t0=0.0, n_steps=32, backbone=BackboneConfig(kind="is", n_samples=256))
    assert return_accuracy(ctx, cfg, 0.99, 0, blind, tgt, rng) >= 0.9
    tau = return_accuracy(ctx, cfg, 0.05, 0, blind, tgt, rng)
    assert 0.3 <= tau <= 0.7


def test_return_accuracy_empty(rng):
    ctx, tgt = _sphere4()
    with pytest.warns(UserWarning):
        assert return_accuracy(ctx, FripsConfig(t0=0.0), 0.5, 0, np.zeros((0, 5)), tgt, rng) == 0.0
