"""Monte Carlo samplers for the denoising posterior ``pi_{1|t}(. | x_t)``.

Three backbones are provided: Riemannian MALA with warm-startable chains,
rejection sampling and self-normalised importance sampling, the last two using
exact draws from ``nu_{1|t}`` as proposals.  Every sampler is vectorised over
a batch of conditioning points ``xt``; particles come back with shape
``batch + (N,) + point_shape``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, DegenerateEnsembleError
from .interpolant import in_support, log_p_and_grad_x1, sample_nu

_PROJECT_FACTOR = 0.99


@dataclass(frozen=True)
class BackboneConfig:
    """Posterior-sampler settings.

    MALA keeps the last ``n_keep`` states of each of ``n_chains`` chains run
    for ``n_steps`` steps.  IS draws ``n_samples`` proposals.  RS targets
    ``n_samples`` accepted draws and stops after ``rs_cap`` proposals
    (default ``100 * n_samples``).
    """

    kind: str = "mala"
    n_chains: int = 8
    n_steps: int = 32
    n_keep: int = 8
    step_size: float = 0.01
    target_accept: float = 0.57
    grow: float = 1.02
    shrink: float = 0.98
    min_step: float = 1e-8
    max_step: float = 10.0
    use_jacobian: bool = True
    n_samples: int = 256
    rs_cap: int | None = None
    rs_fill: str = "accepted"
    adaptive_bound: bool = False

    def __post_init__(self):
        if self.kind not in ("mala", "rs", "is"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if min(self.n_chains, self.n_steps, self.n_keep, self.n_samples) < 1:
            raise ValueError("chain, step, keep and sample counts must be >= 1")
        if self.n_keep > self.n_steps:
            raise ValueError("cannot keep more states than steps per chain")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.rs_fill not in ("accepted", "nu"):
            raise ValueError("rs_fill must be 'accepted' or 'nu'")
        if self.rs_cap is not None and self.rs_cap < 1:
            raise ValueError("rs_cap must be >= 1")

    @property
    def n_particles(self):
        return self.n_chains * self.n_keep if self.kind == "mala" else self.n_samples

    @property
    def proposal_cap(self):
        return self.rs_cap if self.rs_cap is not None else 100 * self.n_samples


@dataclass
class WeightedEnsemble:
    """Particles with normalised weights, plus per-conditioning-point diagnostics."""

    particles: np.ndarray
    weights: np.ndarray
    ess: np.ndarray
    acceptance: np.ndarray | None = None
    log_total: np.ndarray | None = None
    fallback: np.ndarray | None = None
    degenerate: np.ndarray | None = None
    log_bound: float | None = None


@dataclass
class MalaState:
    """Chain states carried between posterior calls (one set of chains per conditioning point)."""

    current: np.ndarray
    step: np.ndarray
    log_q: np.ndarray
    grad_q: np.ndarray
    accepted: int = 0
    proposed: int = 0


def _expand_xt(m, xt):
    xt = np.asarray(xt, dtype=float)
    return np.expand_dims(xt, xt.ndim - m.point_ndim)


def fresh_chain_init(ctx, t, xt, n, rng):
    """``n`` starting points per conditioning point, each with ``xt`` inside its support.

    On compact manifolds a direction is drawn uniformly and a radius uniformly
    in the scaled injectivity domain, ``Exp_xt(r xi)`` with
    ``r = (1 - t) c(xi) U^{1/d}``.  On R^d a proposal draw is used.
    """
    m = ctx.manifold
    xe = _expand_xt(m, xt)
    batch = m.batch_shape(xe)[:-1] + (n,)
    xb = np.broadcast_to(xe, batch + m.point_shape)
    if ctx.euclidean:
        if t > 0:
            return sample_nu(ctx, t, xb, rng)
        return xb + ctx.sample_base(rng, batch)
    direction = m.random_unit_tangent(xb, rng)
    radius = (1.0 - t) / m.cut_fraction(direction) * rng.uniform(size=batch) ** (1.0 / m.dim)
    return m.exp(xb, m.expand(radius) * direction)


def _project(ctx, t, xe, x1):
    """Pull chain states towards ``xe`` until ``xe`` is inside their support."""
    m = ctx.manifold
    if ctx.euclidean:
        shape = m.batch_shape(x1)
        return x1, np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool)
    inside = in_support(ctx, t, xe, x1)
    v, ok = m.log_masked(x1, xe)
    frac = m.cut_fraction(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = _PROJECT_FACTOR * (1.0 - t) / frac
    moved = ~inside & ok
    factor = np.where(moved, 1.0 - s, 0.0)
    out = np.where(m.expand(moved), m.exp(x1, m.expand(factor) * v), x1)
    return out, moved, ~inside & ~ok


def warm_start_project(ctx, t_new, x_new, x1_prev, rng):
    """Return ``x1_prev`` if ``x_new`` is in its support, else the point ``Exp_{x1}((1 - s) Log_{x1} x_new)``.

    Here ``s = 0.99 (1 - t) c / dist`` so that ``x_new`` ends up strictly
    inside the support.  Pairs on the cut locus are replaced by a fresh
    initialisation.
    """
    m = ctx.manifold
    x_new = np.asarray(x_new, dtype=float)
    out, _, failed = _project(ctx, t_new, x_new, np.asarray(x1_prev, dtype=float))
    if np.any(failed):
        fresh = fresh_chain_init(ctx, t_new, x_new, 1, rng)
        fresh = fresh.reshape(np.broadcast_shapes(m.batch_shape(x_new), failed.shape) + m.point_shape)
        out = np.where(m.expand(failed), fresh, out)
    return out


def _posterior_terms(ctx, t, xe, x1, lq, gq):
    lp, g = log_p_and_grad_x1(ctx, t, xe, x1)
    lp = lp + lq
    finite = np.isfinite(lp)
    g = g + gq
    g = np.where(ctx.manifold.expand(finite) & np.isfinite(g), g, 0.0)
    return lp, g


def _log_proposal(m, y, x, step, use_jacobian, v=None):
    """Approximate log density of ``x = Exp_y(sqrt(2 step) Z)``.

    ``v`` may pass the tangent vector that generated ``x`` from ``y``; it is
    used in place of ``Log_y x`` wherever it lies in the injectivity domain.
    """
    if v is None:
        v, ok = m.log_masked(y, x)
    else:
        ok = m.cut_fraction(v) < 1.0 - 1e-9
        if not np.all(ok):
            w, ok2 = m.log_masked(y, x)
            v = np.where(m.expand(ok), v, w)
            ok = ok | ok2
    sq = m.inner(v, v)
    val = -sq / (4.0 * step) - 0.5 * m.dim * np.log(4.0 * np.pi * step)
    if use_jacobian:
        with np.errstate(divide="ignore", invalid="ignore"):
            val = val - m.log_jac(v)
    return np.where(ok & np.isfinite(val), val, -np.inf)


def mala_posterior(ctx, t, xt, target, cfg, rng, warm=None, n_steps=None):
    """Riemannian MALA on the denoising posterior; returns ``(ensemble, state)``.

    Proposals are ``Exp_y(sqrt(2 delta) Z)`` with ``y = Exp_x(delta grad)``;
    proposals outside the posterior support are rejected.  Step sizes adapt
    per chain (x ``grow`` on accept, x ``shrink`` on reject).  ``warm``
    carries chain states and step sizes from a previous call; they are
    projected into the new support first.
    """
    if not getattr(target, "has_grad", False):
        raise CapabilityError("MALA needs the target gradient")
    m = ctx.manifold
    n_steps = cfg.n_steps if n_steps is None else n_steps
    keep = min(cfg.n_keep, n_steps)
    xe = _expand_xt(m, xt)
    if warm is None:
        cur = fresh_chain_init(ctx, t, xt, cfg.n_chains, rng)
        step = np.full(m.batch_shape(cur), cfg.step_size)
        lq, gq = target.value_and_grad(cur)
        accepted = proposed = 0
    else:
        cur, moved, failed = _project(ctx, t, xe, warm.current)
        if np.any(failed):
            fresh = fresh_chain_init(ctx, t, xt, cfg.n_chains, rng)
            cur = np.where(m.expand(failed), fresh, cur)
            moved = moved | failed
        step, lq, gq = warm.step.copy(), warm.log_q.copy(), warm.grad_q.copy()
        if np.any(moved):
            lq_new, gq_new = target.value_and_grad(cur[moved])
            lq[moved] = lq_new
            gq[moved] = gq_new
        accepted, proposed = warm.accepted, warm.proposed
    lp, g = _posterior_terms(ctx, t, xe, cur, lq, gq)
    kept = []
    acc_here = 0
    for i in range(n_steps):
        se = m.expand(step)
        y = m.exp(cur, se * g)
        noise = m.tangent_gaussian(y, np.sqrt(2.0 * step), rng)
        prop = m.exp(y, noise)
        lq_p, gq_p = target.value_and_grad(prop)
        lp_p, g_p = _posterior_terms(ctx, t, xe, prop, lq_p, gq_p)
        fwd = _log_proposal(m, y, prop, step, cfg.use_jacobian, noise)
        rev = _log_proposal(m, m.exp(prop, se * g_p), cur, step, cfg.use_jacobian)
        with np.errstate(invalid="ignore"):
            log_alpha = lp_p - lp + rev - fwd
        log_alpha = np.where(np.isfinite(lp_p), log_alpha, -np.inf)
        log_alpha = np.where(np.isfinite(lp_p) & ~np.isfinite(lp), np.inf, log_alpha)
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        acc = np.log(rng.uniform(size=step.shape)) < log_alpha
        ae = m.expand(acc)
        cur = np.where(ae, prop, cur)
        g = np.where(ae, g_p, g)
        lp = np.where(acc, lp_p, lp)
        lq = np.where(acc, lq_p, lq)
        gq = np.where(ae, gq_p, gq)
        step = np.clip(step * np.where(acc, cfg.grow, cfg.shrink), cfg.min_step, cfg.max_step)
        acc_here += int(acc.sum())
        if i >= n_steps - keep:
            kept.append(cur)
    nb = cur.ndim - m.point_ndim
    particles = np.stack(kept, axis=nb)
    batch = particles.shape[: nb - 1]
    particles = particles.reshape(batch + (cfg.n_chains * keep,) + m.point_shape)
    return _mala_result(m, cfg, particles, cur, step, lq, gq, accepted, proposed, acc_here, n_steps, keep)


def _mala_result(m, cfg, particles, cur, step, lq, gq, accepted, proposed, acc_here, n_steps, keep):
    nb = particles.ndim - m.point_ndim
    batch = particles.shape[: nb - 1]
    n = particles.shape[nb - 1]
    total = step.size * n_steps
    state = MalaState(cur, step, lq, gq, accepted + acc_here, proposed + total)
    ens = WeightedEnsemble(
        particles=particles,
        weights=np.full(batch + (n,), 1.0 / n),
        ess=np.full(batch, float(n)),
        acceptance=np.full(batch, acc_here / max(total, 1)),
    )
    return ens, state


def _is_ensemble(ctx, t, xt, target, n, rng):
    particles = sample_nu(ctx, t, xt, rng, n=n)
    lw = target.log_q1(particles)
    log_total = logsumexp(lw, axis=-1)
    degenerate = ~np.isfinite(log_total)
    with np.errstate(invalid="ignore"):
        w = np.exp(lw - log_total[..., None])
    w = np.where(degenerate[..., None], 1.0 / n, w)
    ess = 1.0 / np.sum(w * w, axis=-1)
    return WeightedEnsemble(particles, w, ess, log_total=log_total, degenerate=degenerate), lw


def is_posterior(ctx, t, xt, target, cfg, rng):
    """Self-normalised importance sampling with ``nu_{1|t}`` proposals and weights ``q1``."""
    ens, _ = _is_ensemble(ctx, t, xt, target, cfg.n_samples, rng)
    if np.any(ens.degenerate):
        raise DegenerateEnsembleError("every importance weight vanished")
    return ens


def rs_posterior(ctx, t, xt, target, cfg, rng, log_bound=None):
    """Rejection sampling with ``nu_{1|t}`` proposals accepted with probability ``q1 / q1*``.

    Proposals are drawn in rounds until ``n_samples`` are accepted or
    ``proposal_cap`` proposals have been spent.  With ``rs_fill='accepted'``
    the accepted draws are kept with equal weights and, only when none was
    accepted, ``n_samples`` fresh proposal draws replace them.  With
    ``rs_fill='nu'`` every unfilled slot gets a fresh proposal draw.
    ``fallback`` flags conditioning points that used proposal draws.
    ``log_bound`` overrides the target bound (used by the running-max mode);
    the bound in effect at exit is stored on the ensemble as ``log_bound``.
    """
    m = ctx.manifold
    if log_bound is None:
        log_bound = target.upper_bound_log
    if log_bound is None and not cfg.adaptive_bound:
        raise CapabilityError("rejection sampling needs an upper bound on q1")
    bound = -np.inf if log_bound is None else float(log_bound)
    xt = np.asarray(xt, dtype=float)
    batch = m.batch_shape(xt)
    flat = xt.reshape((-1,) + m.point_shape)
    n_pts = flat.shape[0]
    n = cfg.n_samples
    cap = cfg.proposal_cap
    particles = np.zeros((n_pts, n) + m.point_shape)
    filled = np.zeros(n_pts, dtype=int)
    spent = np.zeros(n_pts, dtype=int)
    while True:
        active = np.flatnonzero((filled < n) & (spent < cap))
        if active.size == 0:
            break
        chunk = int(min(n, cap - spent[active].max()))
        props = sample_nu(ctx, t, flat[active], rng, n=chunk)
        lq = target.log_q1(props)
        spent[active] += chunk
        if cfg.adaptive_bound:
            bound = max(bound, float(np.max(lq)))
        acc = np.log(rng.uniform(size=lq.shape)) < lq - bound
        rank = np.cumsum(acc, axis=1) - 1 + filled[active, None]
        take = acc & (rank < n)
        rows = np.broadcast_to(active[:, None], take.shape)[take]
        particles[rows, rank[take]] = props[take]
        filled[active] = np.minimum(filled[active] + acc.sum(axis=1), n)
    fallback = filled == 0 if cfg.rs_fill == "accepted" else filled < n
    weights = np.zeros((n_pts, n))
    if cfg.rs_fill == "accepted":
        k = np.maximum(filled, 1)
        weights = np.where(np.arange(n) < filled[:, None], 1.0 / k[:, None], 0.0)
        empty = np.flatnonzero(fallback)
        if empty.size:
            particles[empty] = sample_nu(ctx, t, flat[empty], rng, n=n)
            weights[empty] = 1.0 / n
    else:
        short = np.flatnonzero(fallback)
        if short.size:
            fresh = sample_nu(ctx, t, flat[short], rng, n=n)
            slot = np.arange(n) >= filled[short, None]
            particles[short] = np.where(m.expand(slot), fresh, particles[short])
        weights[:] = 1.0 / n
    ess = 1.0 / np.sum(weights * weights, axis=-1)
    ens = WeightedEnsemble(
        particles=particles.reshape(batch + (n,) + m.point_shape),
        weights=weights.reshape(batch + (n,)),
        ess=ess.reshape(batch),
        acceptance=(np.minimum(filled, n) / np.maximum(spent, 1)).reshape(batch),
        fallback=fallback.reshape(batch),
    )
    ens.log_bound = bound
    return ens


def posterior_sample(ctx, t, xt, target, cfg, rng, state=None, n_steps=None):
    """Dispatch to the configured backbone; returns ``(ensemble, state)``.

    ``state`` is a :class:`MalaState` for MALA and the running log bound for RS.
    ``n_steps`` overrides the MALA chain length and scales the IS/RS proposal
    count by ``n_steps / cfg.n_steps``.
    """
    if cfg.kind == "mala":
        return mala_posterior(ctx, t, xt, target, cfg, rng, warm=state, n_steps=n_steps)
    if n_steps is not None and n_steps != cfg.n_steps:
        scaled = max(1, round(cfg.n_samples * n_steps / cfg.n_steps))
        cap = None if cfg.rs_cap is None else max(1, round(cfg.rs_cap * n_steps / cfg.n_steps))
        cfg = replace(cfg, n_samples=scaled, rs_cap=cap)
    if cfg.kind == "is":
        ens, _ = _is_ensemble(ctx, t, xt, target, cfg.n_samples, rng)
        return ens, None
    ens = rs_posterior(ctx, t, xt, target, cfg, rng, log_bound=state)
    return ens, (ens.log_bound if cfg.adaptive_bound else None)


@dataclass(frozen=True)
class GaussianConjugatePosterior:
    """Exact posterior draws for a Gaussian target ``N(mean, s^2 I)`` with base ``N(0, sigma0^2 I)``.

    Given ``X_t = t X_1 + (1 - t) X_0`` the posterior of ``X_1`` is Gaussian;
    calling the object returns ``(ensemble, None)`` in the form the engine
    expects from a backbone.
    """

    mean: np.ndarray
    s: float
    sigma0: float = 1.0
    n_samples: int = 64

    def moments(self, t, xt):
        noise = ((1.0 - t) * self.sigma0) ** 2
        prec = 1.0 / self.s**2 + t * t / noise
        var = 1.0 / prec
        mean = var * (np.asarray(self.mean) / self.s**2 + t * np.asarray(xt) / noise)
        return mean, var

    def __call__(self, ctx, t, xt, rng, warm=None):
        xt = np.asarray(xt, dtype=float)
        mean, var = self.moments(t, xt)
        batch = xt.shape[:-1]
        z = rng.standard_normal(batch + (self.n_samples, xt.shape[-1]))
        particles = mean[..., None, :] + np.sqrt(var) * z
        n = self.n_samples
        ens = WeightedEnsemble(particles, np.full(batch + (n,), 1.0 / n), np.full(batch, float(n)))
        return ens, None


__all__ = [
    "BackboneConfig",
    "GaussianConjugatePosterior",
    "MalaState",
    "WeightedEnsemble",
    "fresh_chain_init",
    "is_posterior",
    "mala_posterior",
    "posterior_sample",
    "rs_posterior",
    "warm_start_project",
]
