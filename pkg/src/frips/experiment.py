"""Experiment configuration, budget-matched baselines and the per-cell runner.

A configuration is a TOML file; :func:`load_config` turns it into an
:class:`ExperimentConfig`, raising :class:`ConfigError` with the offending line.
An experiment is a set of cells, one per (method, t0, repetition); FRIPS cells
run first and fix the q1-evaluation budget that the baseline cells then match.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .engine import FripsConfig, return_accuracy, run
from .errors import ConfigError
from .geometry import Euclidean, Grassmann, Sphere
from .interpolant import GaussianBase, InterpolantCtx
from .metrics import msle, mode_weight_error, wasserstein
from .posterior import BackboneConfig, _log_proposal
from .targets import (
    CountingTarget,
    RiemannianMoG,
    StereographicLift,
    StudentMixture,
    ground_truth_sampler,
    logsumexp_last,
    sp,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

METHODS = ("FRIPS-MALA", "FRIPS-IS", "FRIPS-RS", "MALA", "IS", "RS")
FRIPS_METHODS = METHODS[:3]
_BACKBONE_KIND = {"FRIPS-MALA": "mala", "FRIPS-IS": "is", "FRIPS-RS": "rs"}
_GROUND_TRUTH_STREAM = len(METHODS)
_PROBE_STREAM = len(METHODS) + 1
_BLIND_STREAM = len(METHODS) + 2
_CHUNK = 1 << 16

_SCHEMA = {
    "experiment": {
        "name": str,
        "seed": int,
        "n_samples": int,
        "repetitions": int,
        "methods": list,
        "t0": (float, list),
        "output": str,
        "budget": int,
    },
    "manifold": {"kind": str, "d": int, "n": int, "p": int},
    "base": {"sigma0": float},
    "target": {
        "family": str,
        "sigma": float,
        "weights": list,
        "means": (str, list),
        "separation": float,
        "mu1": (float, list),
        "mu2": (float, list),
        "tau": float,
        "nu": float,
        "lift": str,
        "radius": float,
        "mean": list,
        "s": float,
    },
    "frips": {
        "t_end": float,
        "n_steps": int,
        "init": str,
        "init_steps": int,
        "init_step_size": float,
        "init_posterior_steps": int,
        "init_noise": float,
        "imh_batch": int,
        "start": str,
    },
    "backbone": {
        "n_chains": int,
        "n_steps": int,
        "n_keep": int,
        "step_size": float,
        "grow": float,
        "shrink": float,
        "min_step": float,
        "max_step": float,
        "use_jacobian": bool,
        "n_samples": int,
        "rs_cap": int,
        "rs_fill": str,
        "adaptive_bound": bool,
    },
    "metrics": {"wasserstein": bool, "msle": bool, "xi": float, "wasserstein_cap": int},
    "probe": {"t_grid": list, "n_blind": int, "balanced": bool, "method": str, "components": list},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment description; ``raw`` keeps the parsed TOML tables."""

    name: str
    raw: dict
    methods: tuple
    t0_grid: tuple
    n_samples: int = 4096
    repetitions: int = 4
    seed: int = 0
    output: str = "results/experiment.csv"
    budget: int | None = None
    wasserstein: bool = False
    msle: bool = False
    xi: float = 0.99
    wasserstein_cap: int = 512

    @property
    def config_hash(self):
        body = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(body.encode()).hexdigest()[:12]

    def frips_config(self, t0, method):
        bb = backbone_config(self.raw.get("backbone", {}), method)
        return FripsConfig(t0=t0, backbone=bb, **self.raw.get("frips", {}))


@dataclass
class ResultRow:
    config_hash: str
    method: str
    t0: float
    repetition: int
    w_hat: float
    rel_err: float
    wasserstein: float
    msle: float
    q1_eval_count: int
    wall_time: float
    drop_rate: float
    mean_acceptance: float
    mean_ess: float


@dataclass
class ProbeRow:
    config_hash: str
    method: str
    t: float
    component: int
    tau: float
    n_blind: int
    q1_eval_count: int
    wall_time: float


TIMING_COLUMNS = ("wall_time",)


# configuration ---------------------------------------------------------------


def _find_line(text, section, key=None):
    """1-based line of ``key`` inside ``[section]`` (or of the header), if present."""
    lines = text.splitlines()
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
    current = None
    for i, line in enumerate(lines, 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _type_ok(value, expected):
    kinds = expected if isinstance(expected, tuple) else (expected,)
    for kind in kinds:
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return True
        if kind not in (int, float) and isinstance(value, kind):
            return True
    return False


def parse_config(text):
    """Parse and validate configuration text; returns an :class:`ExperimentConfig`."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed configuration: {exc}", int(m.group(1)) if m else None) from None
    return config_from_raw(raw, text)


def config_from_raw(raw, text=""):
    """Validate parsed tables; ``text`` (the source, if any) is only used for line numbers."""

    def fail(msg, section, key=None):
        raise ConfigError(msg, _find_line(text, section, key) or _find_line(text, section))

    for section, table in raw.items():
        if section not in _SCHEMA:
            fail(f"unknown section [{section}]", section)
        if not isinstance(table, dict):
            fail(f"[{section}] must be a table", section)
        for key, value in table.items():
            if key not in _SCHEMA[section]:
                fail(f"unknown key {key!r} in [{section}]", section, key)
            if not _type_ok(value, _SCHEMA[section][key]):
                fail(f"[{section}] {key} has the wrong type", section, key)
    for section in ("experiment", "manifold", "target"):
        if section not in raw:
            raise ConfigError(f"missing section [{section}]")
    exp = raw["experiment"]
    if "name" not in exp:
        fail("experiment name is required", "experiment")
    methods = tuple(exp.get("methods", list(METHODS)))
    for meth in methods:
        if meth not in METHODS:
            fail(f"unknown method {meth!r}; expected one of {', '.join(METHODS)}", "experiment", "methods")
    if len(set(methods)) != len(methods) or not methods:
        fail("methods must be a non-empty list without repeats", "experiment", "methods")
    t0 = exp.get("t0", [])
    t0_grid = tuple(float(t) for t in (t0 if isinstance(t0, list) else [t0]))
    if any(m in FRIPS_METHODS for m in methods) and not t0_grid:
        fail("FRIPS methods need a t0 value or grid", "experiment", "t0")
    for key in ("n_samples", "repetitions"):
        if key in exp and exp[key] < 1:
            fail(f"{key} must be >= 1", "experiment", key)
    if not any(m in FRIPS_METHODS for m in methods) and "budget" not in exp:
        fail("a baseline-only experiment needs an explicit q1 budget", "experiment", "budget")
    met = raw.get("metrics", {})
    cfg = ExperimentConfig(
        name=exp["name"],
        raw=raw,
        methods=methods,
        t0_grid=t0_grid,
        n_samples=exp.get("n_samples", 4096),
        repetitions=exp.get("repetitions", 4),
        seed=exp.get("seed", 0),
        output=exp.get("output", f"results/{exp['name']}.csv"),
        budget=exp.get("budget"),
        wasserstein=met.get("wasserstein", False),
        msle=met.get("msle", False),
        xi=float(met.get("xi", 0.99)),
        wasserstein_cap=met.get("wasserstein_cap", 512),
    )
    # build everything once so that semantic errors surface before any run
    try:
        target, ctx = build_target(raw)
    except (ValueError, TypeError) as exc:
        fail(f"invalid target: {exc}", "target")
    for meth in methods:
        if meth in FRIPS_METHODS:
            for t in t0_grid:
                try:
                    cfg.frips_config(t, meth)
                except (ValueError, TypeError) as exc:
                    fail(f"invalid FRIPS settings for {meth} at t0={t}: {exc}", "frips")
    if cfg.msle and not isinstance(_euclidean_target(target), StudentMixture):
        fail("msle needs a Euclidean (possibly lifted) Student target", "metrics", "msle")
    if (cfg.wasserstein or cfg.msle) and isinstance(ctx.manifold, Grassmann):
        fail("reference samples are unavailable on Grassmann manifolds", "metrics")
    if "probe" in raw:
        _validate_probe(raw["probe"], ctx, target, text)
    return cfg


def with_overrides(cfg, **sections):
    """A revalidated copy of ``cfg`` with ``section={key: value}`` tables merged into its raw tables."""
    raw = copy.deepcopy(cfg.raw)
    for section, table in sections.items():
        raw.setdefault(section, {}).update(table)
    return config_from_raw(raw)


def _validate_probe(probe, ctx, target, text):
    def fail(msg, key=None):
        raise ConfigError(msg, _find_line(text, "probe", key) or _find_line(text, "probe"))

    grid = probe.get("t_grid", [])
    if not grid:
        fail("probe t_grid must not be empty", "t_grid")
    if any(not _type_ok(t, float) or not 0.0 <= t < 1.0 for t in grid):
        fail("probe times must lie in [0, 1)", "t_grid")
    if probe.get("n_blind", 128) < 1:
        fail("n_blind must be >= 1", "n_blind")
    if probe.get("method", "FRIPS-MALA") not in FRIPS_METHODS:
        fail("probe method must be a FRIPS method", "method")
    comps = probe.get("components", list(range(target.n_components)))
    if any(not isinstance(c, int) or not 0 <= c < target.n_components for c in comps):
        fail("probe components out of range", "components")
    if isinstance(ctx.manifold, Grassmann):
        fail("the probe needs exact component samples, which Grassmann mixtures lack")


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def backbone_config(table, method):
    """Backbone settings for a FRIPS method.  FRIPS-RS spends exactly ``n_samples`` proposals per call
    unless ``rs_cap`` is set, which keeps its q1 count fixed."""
    kind = _BACKBONE_KIND[method]
    bb = BackboneConfig(kind=kind, **table)
    if kind == "rs" and "rs_cap" not in table:
        bb = replace(bb, rs_cap=bb.n_samples)
    return bb


def _vector(value, d, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"{name} must be a scalar or a length-{d} list")
    return arr


def grassmann_pair(n, p, distance):
    """Two subspaces of R^n at geodesic ``distance`` with all principal angles equal."""
    q = min(p, n - p)
    theta = distance / math.sqrt(q)
    if theta >= math.pi / 2:
        raise ValueError("distance too large for equal principal angles")
    a = np.zeros((n, p))
    a[:p, :p] = np.eye(p)
    b = a.copy()
    for i in range(q):
        b[i, i] = math.cos(theta)
        b[p + i, i] = math.sin(theta)
    return np.stack([a, b])


def build_manifold(table):
    kind = table.get("kind")
    if kind == "sphere":
        return Sphere(table["d"])
    if kind == "euclidean":
        return Euclidean(table["d"])
    if kind == "grassmann":
        return Grassmann(table["n"], table["p"])
    raise ValueError(f"unknown manifold kind {kind!r}")


def build_target(raw):
    """The (uncounted) target and interpolant context described by a parsed config."""
    man = build_manifold(raw["manifold"])
    tg = raw["target"]
    family = tg.get("family")
    weights = np.asarray(tg.get("weights", [2 / 3, 1 / 3]), dtype=float)
    if family == "mog":
        means = tg.get("means", "antipodal")
        if isinstance(man, Grassmann):
            if "separation" not in tg:
                raise ValueError("Grassmann mixtures need a mode separation")
            mu = grassmann_pair(man.n, man.p, tg["separation"])
        elif means == "antipodal":
            e = np.zeros(man.point_shape)
            e[0] = 1.0
            mu = np.stack([e, -e])
        elif isinstance(means, list):
            mu = np.asarray(means, dtype=float)
        else:
            raise ValueError(f"unknown means rule {means!r}")
        if "sigma" not in tg:
            raise ValueError("mog needs sigma")
        target = RiemannianMoG(man, mu, np.asarray(tg["sigma"], dtype=float), weights[: mu.shape[0]])
    elif family == "gaussian":
        if not isinstance(man, Euclidean):
            raise ValueError("the Gaussian family lives on Euclidean space")
        mean = _vector(tg.get("mean", 0.0), man.d, "mean")
        target = RiemannianMoG(man, mean[None], np.array([tg.get("s", 1.0)]), np.array([1.0]))
    elif family == "student":
        if not isinstance(man, Euclidean):
            raise ValueError("Student mixtures are defined on Euclidean space; use lift for the sphere")
        target = StudentMixture(
            _vector(tg.get("mu1", 2.0), man.d, "mu1"),
            _vector(tg.get("mu2", -1.0), man.d, "mu2"),
            tau=tg.get("tau", 0.05),
            nu=tg.get("nu", 1.0),
            weights=weights,
        )
    else:
        raise ValueError(f"unknown target family {family!r}")
    lift = tg.get("lift", "none")
    if lift == "stereographic":
        target = StereographicLift(target, tg.get("radius"))
    elif lift != "none":
        raise ValueError(f"unknown lift {lift!r}")
    man = target.manifold
    if isinstance(man, Euclidean):
        ctx = InterpolantCtx(man, GaussianBase(raw.get("base", {}).get("sigma0", 1.0)))
    else:
        ctx = InterpolantCtx(man)
    return target, ctx


def _euclidean_target(target):
    return target.inner if isinstance(target, StereographicLift) else target


def to_euclidean(samples, target):
    """Samples in the coordinates of the underlying Euclidean target."""
    if isinstance(target, StereographicLift):
        return sp(samples, target.radius)
    return samples


def balanced_blind_samples(target, n_per_component, rng):
    """``n_per_component`` exact draws from every component, stacked with their labels."""
    inner = target.inner if isinstance(target, CountingTarget) else target
    parts = [inner.sample_component(j, rng, n_per_component) for j in range(inner.n_components)]
    labels = np.repeat(np.arange(inner.n_components), n_per_component)
    return np.concatenate(parts), labels


# baselines -------------------------------------------------------------------


def direct_mala(ctx, target, n, n_steps, rng, cfg=None):
    """Riemannian MALA chains targeting ``q1`` directly, started from the base distribution.

    Returns the final state of each of the ``n`` chains and the acceptance rate.
    """
    cfg = BackboneConfig() if cfg is None else cfg
    m = ctx.manifold
    x = ctx.sample_base(rng, n)
    lq, g = target.value_and_grad(x)
    step = np.full(n, cfg.step_size)
    accepted = 0
    for _ in range(n_steps):
        se = m.expand(step)
        y = m.exp(x, se * g)
        noise = m.tangent_gaussian(y, np.sqrt(2.0 * step), rng)
        prop = m.exp(y, noise)
        lq_p, g_p = target.value_and_grad(prop)
        fwd = _log_proposal(m, y, prop, step, cfg.use_jacobian, noise)
        rev = _log_proposal(m, m.exp(prop, se * g_p), x, step, cfg.use_jacobian)
        with np.errstate(invalid="ignore"):
            log_alpha = lq_p - lq + rev - fwd
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        acc = np.log(rng.uniform(size=n)) < log_alpha
        ae = m.expand(acc)
        x = np.where(ae, prop, x)
        g = np.where(ae, g_p, g)
        lq = np.where(acc, lq_p, lq)
        step = np.clip(step * np.where(acc, cfg.grow, cfg.shrink), cfg.min_step, cfg.max_step)
        accepted += int(acc.sum())
    return x, accepted / max(1, n * n_steps)


def _proposal_chunks(budget):
    left = budget
    while left > 0:
        k = min(_CHUNK, left)
        left -= k
        yield k


def importance_baseline(ctx, target, n, budget, rng):
    """Self-normalised IS from the base distribution with ``budget`` proposals, resampled to ``n``.

    Resampling is streamed: after each chunk every output slot keeps its
    current draw with probability ``W_old / (W_old + W_chunk)`` and otherwise
    takes a weighted draw from the chunk, which is multinomial resampling of
    the whole proposal set.  Returns the samples and the ESS of all weights.
    """
    out = None
    log_w = -np.inf
    log_w2 = -np.inf
    for k in _proposal_chunks(budget):
        x = ctx.sample_base(rng, k)
        lw = target.log_q1(x) - ctx.log_base(x)
        lw = np.where(np.isnan(lw), -np.inf, lw)
        log_chunk = logsumexp_last(lw)
        if not np.isfinite(log_chunk):
            continue
        p = np.exp(lw - log_chunk)
        draw = x[rng.choice(k, size=n, p=p / p.sum())]
        if out is None:
            out = draw
        else:
            stay = rng.uniform(size=n) < np.exp(log_w - np.logaddexp(log_w, log_chunk))
            out = np.where(ctx.manifold.expand(stay), out, draw)
        log_w = np.logaddexp(log_w, log_chunk)
        log_w2 = np.logaddexp(log_w2, logsumexp_last(2.0 * lw))
    if out is None:
        return None, 0.0
    return out, float(np.exp(2.0 * log_w - log_w2))


def rejection_baseline(ctx, target, n, budget, rng):
    """Rejection sampling from the base distribution with ``budget`` proposals; keeps the first ``n`` accepted.

    The envelope is the known bound on ``q1 / pi0`` when the target provides
    one on a compact manifold, otherwise the largest ratio seen in the stream;
    a proposal with uniform ``u`` is accepted iff ``log r - log u >= bound``,
    which lets candidates be filtered on the fly against the running maximum.
    Returns the accepted samples and the acceptance rate.
    """
    m = ctx.manifold
    known = target.upper_bound_log if m.compact else None
    bound = None if known is None else known + m.log_volume
    run_max = -np.inf
    keys, pts, order = [], [], []
    seen = 0
    kept = 0
    for k in _proposal_chunks(budget):
        x = ctx.sample_base(rng, k)
        lr = target.log_q1(x) - ctx.log_base(x)
        lr = np.where(np.isnan(lr), -np.inf, lr)
        key = lr - np.log(rng.uniform(size=k))
        run_max = max(run_max, float(np.max(lr)))
        thresh = bound if bound is not None else run_max
        sel = np.flatnonzero(key >= thresh)
        if bound is not None and kept >= n:
            sel = sel[:0]
        keys.append(key[sel])
        pts.append(x[sel])
        order.append(seen + sel)
        kept += sel.size
        seen += k
        if bound is None and keys:
            keys, pts, order = _filter_candidates(keys, pts, order, run_max)
    keys = np.concatenate(keys) if keys else np.zeros(0)
    pts = np.concatenate(pts) if pts else np.zeros((0,) + m.point_shape)
    order = np.concatenate(order) if order else np.zeros(0, dtype=int)
    thresh = bound if bound is not None else run_max
    ok = keys >= thresh
    pts, order = pts[ok], order[ok]
    rate = pts.shape[0] / max(1, budget)
    pts = pts[np.argsort(order, kind="stable")][:n]
    return pts, rate


def _filter_candidates(keys, pts, order, thresh):
    k = np.concatenate(keys)
    ok = k >= thresh
    return [k[ok]], [np.concatenate(pts)[ok]], [np.concatenate(order)[ok]]


# cells -----------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    method: str
    t0: float
    t0_index: int
    repetition: int
    budget: int | None = None


def cell_seed(seed, method, t0_index, repetition):
    idx = METHODS.index(method) if isinstance(method, str) else int(method)
    return np.random.SeedSequence([seed, idx, t0_index, repetition])


def reference_samples(cfg, target, repetition):
    """Exact target draws shared by every cell of one repetition."""
    rng = np.random.default_rng(cell_seed(cfg.seed, _GROUND_TRUTH_STREAM, 0, repetition))
    x, _ = ground_truth_sampler(target, rng, cfg.n_samples)
    return x


def run_cell(cfg, cell):
    """Run one (method, t0, repetition) cell and return its :class:`ResultRow`."""
    tic = time.perf_counter()
    base_target, ctx = build_target(cfg.raw)
    target = CountingTarget(base_target)
    rng = np.random.default_rng(cell_seed(cfg.seed, cell.method, cell.t0_index, cell.repetition))
    n = cfg.n_samples
    acc = ess = float("nan")
    drop = 0.0
    if cell.method in FRIPS_METHODS:
        fc = cfg.frips_config(cell.t0, cell.method)
        blind = None
        if fc.start == "blind":
            brng = np.random.default_rng(cell_seed(cfg.seed, _BLIND_STREAM, cell.t0_index, cell.repetition))
            per = -(-n // base_target.n_components)
            blind = balanced_blind_samples(base_target, per, brng)[0]
            blind = blind[brng.permutation(blind.shape[0])[:n]]
        x, traj = run(ctx, fc, target, n, rng, blind=blind, keep_states=False)
        x = x[~traj.aborted]
        drop = traj.drop_rate
        acc = _nanmean(traj.acceptance)
        ess = _nanmean(traj.ess)
    elif cell.method == "MALA":
        steps = max(0, (cell.budget - n) // n)
        x, acc = direct_mala(ctx, target, n, steps, rng, backbone_config(cfg.raw.get("backbone", {}), "FRIPS-MALA"))
    elif cell.method == "IS":
        x, ess = importance_baseline(ctx, target, n, cell.budget, rng)
        if x is None:
            x, drop = np.zeros((0,) + ctx.manifold.point_shape), 1.0
    else:
        x, acc = rejection_baseline(ctx, target, n, cell.budget, rng)
        drop = 1.0 - x.shape[0] / n
    return _score_cell(cfg, cell, base_target, ctx, x, target.count, time.perf_counter() - tic, drop, acc, ess)


def _nanmean(a):
    a = np.asarray(a, dtype=float)
    return float(np.mean(a[np.isfinite(a)])) if np.any(np.isfinite(a)) else float("nan")


def _score_cell(cfg, cell, target, ctx, x, count, wall, drop, acc, ess):
    nan = float("nan")
    w_hat = rel = w2 = err = nan
    if x.shape[0] > 0:
        w_hat, rel = mode_weight_error(x, target, float(target.weights[0]))
        if cfg.wasserstein or cfg.msle:
            ref = reference_samples(cfg, target, cell.repetition)
            if cfg.wasserstein:
                w2 = wasserstein(x, ref, ctx.manifold, cap=cfg.wasserstein_cap)
            if cfg.msle:
                k = min(x.shape[0], ref.shape[0])
                err = msle(to_euclidean(x[:k], target), to_euclidean(ref[:k], target), cfg.xi)
    return ResultRow(
        config_hash=cfg.config_hash,
        method=cell.method,
        t0=cell.t0,
        repetition=cell.repetition,
        w_hat=w_hat,
        rel_err=rel,
        wasserstein=w2,
        msle=err,
        q1_eval_count=int(count),
        wall_time=wall,
        drop_rate=float(drop),
        mean_acceptance=float(acc),
        mean_ess=float(ess),
    )


def failed_row(cfg, cell):
    nan = float("nan")
    return ResultRow(cfg.config_hash, cell.method, cell.t0, cell.repetition, nan, nan, nan, nan, 0, nan, 1.0, nan, nan)


def frips_cells(cfg):
    return [
        Cell(meth, t0, i, rep)
        for meth in cfg.methods
        if meth in FRIPS_METHODS
        for i, t0 in enumerate(cfg.t0_grid)
        for rep in range(cfg.repetitions)
    ]


def baseline_cells(cfg, frips_rows):
    """Baseline cells sized to the median FRIPS q1 count of the same repetition."""
    cells = []
    for rep in range(cfg.repetitions):
        counts = [r.q1_eval_count for r in frips_rows if r.repetition == rep and r.q1_eval_count > 0]
        budget = int(np.median(counts)) if counts else cfg.budget
        if budget is None:
            continue
        for meth in cfg.methods:
            if meth not in FRIPS_METHODS:
                cells.append(Cell(meth, float("nan"), 0, rep, budget))
    return cells


def best_t0(rows, method, metric="rel_err"):
    """The grid value of ``t0`` with the lowest mean ``metric`` over the method's completed rows."""
    groups = {}
    for r in rows:
        v = getattr(r, metric)
        if r.method == method and math.isfinite(v):
            groups.setdefault(r.t0, []).append(v)
    if not groups:
        raise ValueError(f"no finite {metric} values for {method}")
    return min(groups, key=lambda t: (float(np.mean(groups[t])), t))


def budget_audit(rows):
    """Ratio of the largest to the smallest q1 count over the completed cells."""
    counts = [r.q1_eval_count for r in rows if r.q1_eval_count > 0]
    if not counts:
        return float("nan")
    return max(counts) / min(counts)


def summarise(cfg, rows):
    """Mean and sd of every metric per (method, t0), plus the budget audit."""
    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.t0), []).append(r)
    out = []
    for (meth, t0), rs in groups.items():
        entry = {"method": meth, "t0": None if math.isnan(t0) else t0, "n_rows": len(rs)}
        for name in ("w_hat", "rel_err", "wasserstein", "msle", "q1_eval_count", "drop_rate", "mean_acceptance"):
            vals = np.array([getattr(r, name) for r in rs], dtype=float)
            vals = vals[np.isfinite(vals)]
            entry[name] = (
                {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
                if vals.size
                else None
            )
        out.append(entry)
    return {
        "experiment": cfg.name,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "n_samples": cfg.n_samples,
        "repetitions": cfg.repetitions,
        "budget_ratio": budget_audit(rows),
        "groups": out,
    }


# probe -----------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeCell:
    t: float
    t_index: int
    component: int


def probe_settings(cfg):
    p = cfg.raw.get("probe", {})
    return {
        "t_grid": tuple(float(t) for t in p.get("t_grid", ())),
        "n_blind": p.get("n_blind", 128),
        "balanced": p.get("balanced", True),
        "method": p.get("method", "FRIPS-MALA"),
        "components": tuple(p.get("components", [0])),
    }


def probe_cells(cfg):
    ps = probe_settings(cfg)
    return [ProbeCell(t, i, j) for i, t in enumerate(ps["t_grid"]) for j in ps["components"]]


def run_probe_cell(cfg, cell):
    """Return accuracy of one component at one time.

    With ``balanced`` every component contributes ``n_blind`` exact draws;
    otherwise ``n_blind`` draws come from the true mixture and the
    classifier is told the resulting per-component counts.
    """
    tic = time.perf_counter()
    ps = probe_settings(cfg)
    base_target, ctx = build_target(cfg.raw)
    target = CountingTarget(base_target)
    rng = np.random.default_rng(cell_seed(cfg.seed, _PROBE_STREAM, cell.t_index, cell.component))
    if ps["balanced"]:
        blind, labels = balanced_blind_samples(base_target, ps["n_blind"], rng)
    else:
        blind, labels = ground_truth_sampler(base_target, rng, ps["n_blind"])
    counts = np.maximum(np.bincount(labels, minlength=base_target.n_components), 1)
    mine = blind[labels == cell.component]
    # the probe integrates from cell.t; t0 only has to be a valid placeholder
    fc = cfg.frips_config(0.0, ps["method"])
    tau = return_accuracy(ctx, fc, cell.t, cell.component, mine, target, rng, counts=counts)
    return ProbeRow(
        cfg.config_hash,
        ps["method"],
        cell.t,
        cell.component,
        tau,
        int(mine.shape[0]),
        int(target.count),
        time.perf_counter() - tic,
    )


def row_fields(row_type):
    return [f.name for f in fields(row_type)]


def format_value(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def rows_from_csv(text, row_type):
    """Inverse of :func:`rows_to_csv`."""
    lines = text.strip().splitlines()
    names = lines[0].split(",")
    if names != row_fields(row_type):
        raise ValueError("CSV header does not match the row type")
    kinds = {f.name: f.type for f in fields(row_type)}
    cast = {"str": str, "int": int, "float": float}
    return [row_type(**{k: cast[kinds[k]](v) for k, v in zip(names, line.split(","))}) for line in lines[1:]]


def rows_to_csv(rows, row_type):
    lines = [",".join(row_fields(row_type))]
    for r in rows:
        lines.append(",".join(format_value(v) for v in asdict(r).values()))
    return "\n".join(lines) + "\n"


__all__ = [
    "FRIPS_METHODS",
    "METHODS",
    "Cell",
    "ExperimentConfig",
    "ProbeRow",
    "ResultRow",
    "best_t0",
    "budget_audit",
    "build_target",
    "config_from_raw",
    "direct_mala",
    "importance_baseline",
    "load_config",
    "parse_config",
    "rejection_baseline",
    "rows_from_csv",
    "rows_to_csv",
    "run_cell",
    "run_probe_cell",
    "with_overrides",
]
