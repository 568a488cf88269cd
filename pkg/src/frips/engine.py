"""The sampler driver: velocity and score estimates, initialisers and the Euler loop.

All routines run a whole batch of independent trajectories at once; a batch of
points has shape ``(n,) + point_shape``.  One random generator drives the whole
batch, so a run is reproducible from its seed.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError
from .geometry import Grassmann
from .interpolant import _grad_xt
from .posterior import BackboneConfig, MalaState, _is_ensemble, posterior_sample
from .targets import mode_assign


@dataclass(frozen=True)
class FripsConfig:
    """Time grid, posterior backbone and initialiser settings.

    ``init`` is ``"rla"`` (Langevin on the Tweedie score), ``"imh"``
    (pseudo-marginal independent MH) or ``"none"``.  During initialisation
    every posterior call runs ``init_posterior_steps`` MALA steps per chain
    (IS/RS backbones scale their proposal counts by the same factor).
    """

    t0: float
    t_end: float = 0.99
    n_steps: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    init: str = "rla"
    init_steps: int = 128
    init_step_size: float = 0.05
    init_noise: float = 2.0
    init_posterior_steps: int = 320
    imh_batch: int = 512
    start: str = "base"

    def __post_init__(self):
        if not 0.0 <= self.t0 < self.t_end < 1.0:
            raise ValueError("need 0 <= t0 < t_end < 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.init not in ("rla", "imh", "none"):
            raise ValueError(f"unknown initialiser {self.init!r}")
        if self.start not in ("base", "blind"):
            raise ValueError(f"unknown start rule {self.start!r}")
        if self.init_steps < 0 or self.init_posterior_steps < 1 or self.imh_batch < 1:
            raise ValueError("initialiser budgets must be positive")
        if not self.init_step_size > 0:
            raise ValueError("init_step_size must be positive")
        if not self.init_noise > 0:
            raise ValueError("init_noise must be positive")

    def grid(self, t_start=None):
        t_start = self.t0 if t_start is None else t_start
        return np.linspace(t_start, self.t_end, self.n_steps + 1)


@dataclass
class Trajectory:
    """Time grid, stored states and per-step batch diagnostics of a run."""

    times: np.ndarray
    states: np.ndarray | None
    velocity_norm: np.ndarray
    acceptance: np.ndarray
    ess: np.ndarray
    step_size: np.ndarray
    aborted: np.ndarray
    retries: int = 0
    cut_drops: int = 0
    init_acceptance: float = float("nan")
    wall_time: float = 0.0
    first_pass_drops: int = 0

    @property
    def drop_rate(self):
        n = self.aborted.size
        return self.first_pass_drops / n if n else 0.0


def _weighted_sum(m, weights, vecs):
    return np.sum(m.expand(weights) * vecs, axis=weights.ndim - 1)


def _failed(ens, vec):
    bad = ~np.all(np.isfinite(vec.reshape(vec.shape[0], -1)), axis=-1)
    if ens.degenerate is not None:
        bad |= ens.degenerate
    return bad


def velocity_from_ensemble(ctx, t, xt, ens):
    """``sum_i w_i Log_{xt}(X_1^i) / (1 - t)``; particles on the cut locus of ``xt`` contribute 0.

    Returns the velocity and the number of dropped particle terms.
    """
    m = ctx.manifold
    xe = np.expand_dims(xt, xt.ndim - m.point_ndim)
    v, ok = m.log_masked(xe, ens.particles)
    v = np.where(m.expand(ok), v, 0.0)
    return _weighted_sum(m, ens.weights, v) / (1.0 - t), int(ok.size - np.count_nonzero(ok))


def score_from_ensemble(ctx, t, xt, ens):
    """Tweedie estimate ``sum_i w_i grad_{xt} log p_{t|1}(xt | X_1^i)``."""
    m = ctx.manifold
    if isinstance(m, Grassmann):
        raise CapabilityError("the Tweedie score is not available on Grassmann manifolds")
    xe = np.expand_dims(xt, xt.ndim - m.point_ndim)
    g = _grad_xt(ctx, t, xe, ens.particles)
    g = np.where(np.isfinite(g), g, 0.0)
    return _weighted_sum(m, ens.weights, g)


def velocity(ctx, t, xt, target, backbone, warm, rng, posterior=None):
    """Monte Carlo velocity estimate at ``(t, xt)``; returns ``(u, warm', ensemble)``."""
    ens, warm = _posterior(ctx, t, xt, target, backbone, warm, rng, posterior)
    u, _ = velocity_from_ensemble(ctx, t, np.asarray(xt, dtype=float), ens)
    return u, warm, ens


def score(ctx, t, xt, target, backbone, warm, rng, posterior=None, n_steps=None):
    """Monte Carlo estimate of ``grad log p_t(xt)``; returns ``(score, warm', ensemble)``."""
    if isinstance(ctx.manifold, Grassmann):
        raise CapabilityError("the Tweedie score is not available on Grassmann manifolds")
    ens, warm = _posterior(ctx, t, xt, target, backbone, warm, rng, posterior, n_steps)
    return score_from_ensemble(ctx, t, np.asarray(xt, dtype=float), ens), warm, ens


def _posterior(ctx, t, xt, target, backbone, warm, rng, posterior, n_steps=None):
    if posterior is not None:
        return posterior(ctx, t, xt, rng, warm)
    return posterior_sample(ctx, t, xt, target, backbone, rng, state=warm, n_steps=n_steps)


def mode_blind_start(ctx, t0, blind_sample, rng, max_tries=100):
    """``psi_{t0}(X_0, blind)`` with ``X_0`` a base draw, redrawn while on the cut locus."""
    m = ctx.manifold
    blind = np.asarray(blind_sample, dtype=float)
    batch = m.batch_shape(blind)
    if t0 >= 1.0:
        return blind.copy()
    x0 = ctx.sample_base(rng, batch)
    if ctx.euclidean:
        return (1.0 - t0) * x0 + t0 * blind
    out = np.empty_like(x0)
    todo = np.ones(batch, dtype=bool)
    for _ in range(max_tries):
        v, ok = m.log_masked(blind, x0)
        res = m.exp(blind, (1.0 - t0) * v)
        take = todo & ok
        out[take] = res[take]
        todo &= ~ok
        if not np.any(todo):
            return out
        x0 = np.where(m.expand(todo), ctx.sample_base(rng, batch), x0)
    raise RuntimeError("could not draw a base point off the cut locus")


def rla_init(ctx, cfg, target, start, rng, posterior=None):
    """Riemannian Langevin at fixed ``t0``: ``X <- Exp_X(delta s + sqrt(c delta) z)``.

    ``c = cfg.init_noise``.  With ``c = 1`` the chain is stationary for a law
    close to ``p_t0^2``; ``c = 2`` is the usual unadjusted Langevin scaling,
    stationary (up to discretisation) for ``p_t0`` itself.

    Returns the final states and the posterior warm state, which the main
    loop continues from.
    """
    m = ctx.manifold
    x = np.asarray(start, dtype=float).copy()
    warm = None
    delta = cfg.init_step_size
    for _ in range(cfg.init_steps):
        s, warm, _ = score(
            ctx, cfg.t0, x, target, cfg.backbone, warm, rng, posterior, n_steps=cfg.init_posterior_steps
        )
        z = m.tangent_gaussian(x, 1.0, rng)
        x = m.exp(x, delta * s + np.sqrt(cfg.init_noise * delta) * z)
    return x, warm


def log_marginal_estimate(ctx, t, x, target, n, rng):
    """Log of an unbiased (up to a constant) IS estimate of ``p_t(x)`` with ``n`` proposals."""
    ens, _ = _is_ensemble(ctx, t, x, target, n, rng)
    return ens.log_total - np.log(n)


def pseudo_imh_init(ctx, cfg, target, start, rng):
    """Pseudo-marginal independent MH on ``pi_{t0}`` with base-distribution proposals.

    The estimate attached to the current state is kept until a proposal is
    accepted.  Returns ``(states, acceptance rate)``.
    """
    if not ctx.manifold.compact:
        raise CapabilityError("pseudo-IMH needs a compact manifold with a uniform base")
    m = ctx.manifold
    x = np.asarray(start, dtype=float).copy()
    batch = m.batch_shape(x)
    cur = log_marginal_estimate(ctx, cfg.t0, x, target, cfg.imh_batch, rng)
    accepted = 0
    for _ in range(cfg.init_steps):
        prop = ctx.sample_base(rng, batch)
        new = log_marginal_estimate(ctx, cfg.t0, prop, target, cfg.imh_batch, rng)
        with np.errstate(invalid="ignore"):
            log_alpha = np.where(np.isfinite(new), new - cur, -np.inf)
        log_alpha = np.where(np.isfinite(new) & ~np.isfinite(cur), np.inf, log_alpha)
        acc = np.log(rng.uniform(size=batch)) < log_alpha
        x = np.where(m.expand(acc), prop, x)
        cur = np.where(acc, new, cur)
        accepted += int(acc.sum())
    rate = accepted / max(1, cfg.init_steps * int(np.prod(batch)))
    return x, rate


def integrate(ctx, cfg, target, x, rng, warm=None, t_start=None, posterior=None, keep_states=True):
    """Euler loop ``X <- Exp_X(h u_t(X))`` over the uniform grid from ``t_start`` to ``t_end``.

    A trajectory whose posterior estimate fails is retried once with fresh
    chains; if it fails again it is frozen and flagged as aborted.
    """
    m = ctx.manifold
    x = np.asarray(x, dtype=float).copy()
    n = m.batch_shape(x)[0]
    times = cfg.grid(t_start)
    aborted = np.zeros(n, dtype=bool)
    states = [x.copy()] if keep_states else None
    diag = {k: np.zeros(cfg.n_steps) for k in ("velocity_norm", "acceptance", "ess", "step_size")}
    retries = cut_drops = 0
    for k in range(cfg.n_steps):
        t, h = times[k], times[k + 1] - times[k]
        ens, warm = _posterior(ctx, t, x, target, cfg.backbone, warm, rng, posterior)
        u, drops = velocity_from_ensemble(ctx, t, x, ens)
        bad = _failed(ens, u) & ~aborted
        if np.any(bad):
            retries += int(bad.sum())
            ens2, _ = _posterior(ctx, t, x[bad], target, cfg.backbone, None, rng, posterior)
            u2, _ = velocity_from_ensemble(ctx, t, x[bad], ens2)
            u[bad] = u2
            still = np.zeros(n, dtype=bool)
            still[np.flatnonzero(bad)] = _failed(ens2, u2)
            aborted |= still
        cut_drops += drops
        u = np.where(m.expand(aborted), 0.0, u)
        x = m.exp(x, h * u)
        if keep_states:
            states.append(x.copy())
        diag["velocity_norm"][k] = float(np.mean(m.norm(u)[~aborted])) if np.any(~aborted) else np.nan
        diag["acceptance"][k] = float(np.mean(ens.acceptance)) if ens.acceptance is not None else np.nan
        diag["ess"][k] = float(np.mean(ens.ess))
        diag["step_size"][k] = float(np.mean(warm.step)) if isinstance(warm, MalaState) else np.nan
    traj = Trajectory(
        times=times,
        states=np.stack(states) if keep_states else None,
        aborted=aborted,
        retries=retries,
        cut_drops=cut_drops,
        **diag,
    )
    return x, traj


def initial_points(ctx, cfg, target, n, rng, blind=None):
    """Starting points for the initialiser: base draws or mode-blind noised samples."""
    if cfg.start == "blind":
        if blind is None:
            raise ValueError("a mode-blind start needs blind samples")
        return mode_blind_start(ctx, cfg.t0, blind, rng)
    return ctx.sample_base(rng, n)


def run(ctx, cfg, target, n, rng, blind=None, posterior=None, keep_states=True, resample=True):
    """Draw ``n`` approximate target samples; returns ``(samples, trajectory)``.

    Aborted trajectories are rerun once from a fresh initialisation when
    ``resample`` is set; ``trajectory.aborted`` flags those that failed again
    and ``trajectory.drop_rate`` reports the first-pass failure fraction.
    """
    tic = time.perf_counter()
    x, traj = _run_once(ctx, cfg, target, n, rng, blind, posterior, keep_states)
    traj.first_pass_drops = int(traj.aborted.sum())
    bad = np.flatnonzero(traj.aborted)
    if resample and bad.size:
        sub_blind = None if blind is None else np.asarray(blind)[bad]
        x2, traj2 = _run_once(ctx, cfg, target, bad.size, rng, sub_blind, posterior, False)
        x[bad] = x2
        traj.aborted[bad] = traj2.aborted
        traj.retries += traj2.retries
        traj.cut_drops += traj2.cut_drops
    traj.wall_time = time.perf_counter() - tic
    return x, traj


def _run_once(ctx, cfg, target, n, rng, blind, posterior, keep_states):
    x = initial_points(ctx, cfg, target, n, rng, blind)
    warm = None
    init_rate = float("nan")
    if cfg.init == "rla":
        x, warm = rla_init(ctx, cfg, target, x, rng, posterior)
    elif cfg.init == "imh":
        x, init_rate = pseudo_imh_init(ctx, cfg, target, x, rng)
    x, traj = integrate(ctx, cfg, target, x, rng, warm=warm, posterior=posterior, keep_states=keep_states)
    traj.init_acceptance = init_rate
    return x, traj


def noised_samples(ctx, t, x1, rng, max_tries=100):
    """Exact draws of ``X_t`` given ``X_1 = x1``: ``psi_t(X_0; x1)`` with ``X_0`` a base draw."""
    return mode_blind_start(ctx, t, x1, rng, max_tries)


def return_accuracy(ctx, cfg, t, component, blind_samples, target, rng, posterior=None, counts=None):
    """Fraction of trajectories started from noised component samples that return to it.

    Each blind sample ``x1`` is noised to time ``t`` exactly and transported
    from ``t`` to ``t_end``; aborted trajectories count as misses.
    """
    blind = np.asarray(blind_samples, dtype=float)
    n = ctx.manifold.batch_shape(blind)[0] if blind.size else 0
    if n == 0:
        warnings.warn("return accuracy requested with no samples; reporting 0", stacklevel=2)
        return 0.0
    xt = noised_samples(ctx, t, blind, rng)
    if t < cfg.t_end:
        out, traj = integrate(ctx, cfg, target, xt, rng, t_start=t, posterior=posterior, keep_states=False)
        aborted = traj.aborted
    else:
        out, aborted = xt, np.zeros(n, dtype=bool)
    labels = mode_assign(out, target, counts)
    return float(np.mean((labels == component) & ~aborted))


__all__ = [
    "FripsConfig",
    "Trajectory",
    "integrate",
    "mode_blind_start",
    "noised_samples",
    "pseudo_imh_init",
    "return_accuracy",
    "rla_init",
    "run",
    "score",
    "velocity",
]
