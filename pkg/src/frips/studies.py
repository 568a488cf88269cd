"""Multi-stage experiment protocols: t0 sweeps, budget-matched main runs and result caching.

Every stage is an ordinary experiment run through :func:`frips.cli.run_experiment`.
Results are cached as CSV under a key made of the configuration hash and a
hash of the package sources, so a rerun with unchanged code and settings
reads the stored rows instead of recomputing them (runs are deterministic).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cli import run_experiment, run_probe
from .experiment import (
    FRIPS_METHODS,
    ProbeRow,
    ResultRow,
    best_t0,
    rows_from_csv,
    with_overrides,
)

_SOURCE_DIR = Path(__file__).resolve().parent


def code_hash():
    """Short hash of the sources that determine results; part of every cache key.

    This module is left out: its protocol settings already enter the
    configuration hash of every stage.
    """
    h = hashlib.sha256()
    for path in sorted(_SOURCE_DIR.glob("*.py")):
        if path.name == "studies.py":
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _cache_path(cfg, directory, kind):
    return Path(directory) / f"{cfg.name}-{kind}-{cfg.config_hash}-{code_hash()}.csv"


def cached_run(cfg, directory, workers=1):
    """Rows of ``cfg``'s experiment, computed once per (config, code) and cached under ``directory``."""
    path = _cache_path(cfg, directory, "run")
    if path.exists():
        return rows_from_csv(path.read_text(), ResultRow)
    rows, _, _ = run_experiment(cfg, workers, str(path))
    return rows


def cached_probe(cfg, directory, workers=1):
    path = _cache_path(cfg, directory, "probe")
    if path.exists():
        return rows_from_csv(path.read_text(), ProbeRow)
    rows, _, _ = run_probe(cfg, workers, str(path))
    return rows


def group_stats(rows, method, t0=None, metric="rel_err"):
    """Mean and sd of ``metric`` over the completed rows of one (method, t0)."""
    vals = np.array(
        [
            getattr(r, metric)
            for r in rows
            if r.method == method and (t0 is None or r.t0 == t0) and np.isfinite(getattr(r, metric))
        ]
    )
    if vals.size == 0:
        return float("nan"), float("nan")
    return float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0


@dataclass
class SweepResult:
    """Outcome of a coarse t0 sweep followed by full-size runs at the selected values."""

    best: dict
    sweep_rows: list
    main_rows: dict
    baseline_rows: list = field(default_factory=list)

    def wall_time(self, stage="all"):
        rows = {"sweep": self.sweep_rows, "main": self._main(), "all": self.sweep_rows + self._main()}[stage]
        return float(sum(r.wall_time for r in rows if np.isfinite(r.wall_time)))

    def _main(self):
        return [r for rows in self.main_rows.values() for r in rows] + self.baseline_rows

    def all_main_rows(self):
        return self._main()


def sweep_then_run(cfg, grid, sweep_samples, directory, sweep_repetitions=1, workers=1, metric="rel_err"):
    """Coarse sweep of every FRIPS method in ``cfg`` over ``grid``, then the full run at each method's best t0.

    The sweep uses ``sweep_samples`` samples and ``sweep_repetitions``
    repetitions; the main runs use ``cfg``'s own sizes.  Baselines listed in
    ``cfg`` run once, budget-matched to the median FRIPS count of the main runs.
    """
    frips = [m for m in cfg.methods if m in FRIPS_METHODS]
    baselines = [m for m in cfg.methods if m not in FRIPS_METHODS]
    sweep_cfg = with_overrides(
        cfg,
        experiment={
            "name": f"{cfg.name}-sweep",
            "methods": frips,
            "t0": [float(t) for t in grid],
            "n_samples": sweep_samples,
            "repetitions": sweep_repetitions,
        },
    )
    sweep_rows = cached_run(sweep_cfg, directory, workers)
    best = {m: best_t0(sweep_rows, m, metric) for m in frips}
    main = {}
    for m in frips:
        main_cfg = with_overrides(cfg, experiment={"name": f"{cfg.name}-{m.lower()}", "methods": [m], "t0": best[m]})
        main[m] = cached_run(main_cfg, directory, workers)
    base_rows = []
    if baselines:
        counts = [r.q1_eval_count for rows in main.values() for r in rows if r.q1_eval_count > 0]
        budget = int(np.median(counts))
        base_cfg = with_overrides(
            cfg, experiment={"name": f"{cfg.name}-baselines", "methods": baselines, "t0": [], "budget": budget}
        )
        base_rows = cached_run(base_cfg, directory, workers)
    return SweepResult(best, sweep_rows, main, base_rows)


def summary_table(result, truth_label="rel_err"):
    """Plain-text summary lines of a :class:`SweepResult`."""
    lines = []
    for m, t0 in result.best.items():
        mean, sd = group_stats(result.main_rows[m], m, metric=truth_label)
        lines.append(f"{m:<11} t0={t0:<5g} {truth_label} {mean:.4f} +- {sd:.4f}")
    for m in sorted({r.method for r in result.baseline_rows}):
        mean, sd = group_stats(result.baseline_rows, m, metric=truth_label)
        lines.append(f"{m:<11} {'':<8} {truth_label} {mean:.4f} +- {sd:.4f}")
    return lines


def write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# protocols shared by the experiment scripts and the acceptance suite --------------------

D4_GRID = (0.4, 0.5, 0.6)
D4_SWEEP_SAMPLES = 256
D4_METHODS = ["FRIPS-MALA", "FRIPS-IS", "MALA"]
GRASSMANN_GRID = (0.3, 0.5, 0.7)
GRASSMANN_SWEEP_SAMPLES = 128


def d4_table(cfg, directory, workers=1):
    """FRIPS-MALA and FRIPS-IS at their swept t0 on the d=4 sphere, plus the matched direct-MALA baseline."""
    cfg = with_overrides(cfg, experiment={"methods": D4_METHODS})
    return sweep_then_run(cfg, D4_GRID, D4_SWEEP_SAMPLES, directory, workers=workers)


def grassmann_table(cfg, directory, workers=1):
    """Swept-t0 run of the methods in a Grassmann configuration."""
    return sweep_then_run(cfg, GRASSMANN_GRID, GRASSMANN_SWEEP_SAMPLES, directory, workers=workers)


def method_wall_time(result, method):
    """Total wall time of one method over the sweep and the main stage."""
    return float(sum(r.wall_time for r in result.sweep_rows + result.all_main_rows() if r.method == method))


@dataclass
class GridStudy:
    """Rows of a full t0 grid with per-metric best values for each FRIPS method."""

    rows: list
    best: dict

    def at_best(self, method, metric):
        return group_stats(self.rows, method, self.best[(method, metric)], metric)[0]

    def baseline(self, method, metric):
        return group_stats(self.rows, method, metric=metric)[0]


def grid_study(cfg, directory, metrics=("rel_err", "msle"), workers=1):
    """Every t0 of ``cfg``'s grid at full size; the best t0 is picked separately per metric."""
    rows = cached_run(cfg, directory, workers)
    best = {(m, k): best_t0(rows, m, k) for m in cfg.methods if m in FRIPS_METHODS for k in metrics}
    return GridStudy(rows, best)


def probe_table(rows):
    """``{(t, component): tau}`` from probe rows."""
    return {(r.t, r.component): r.tau for r in rows}
