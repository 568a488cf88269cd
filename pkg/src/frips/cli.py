"""Command-line driver: ``frips run|probe|validate <config>``."""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .errors import ConfigError
from .experiment import (
    METHODS,
    ProbeRow,
    ResultRow,
    baseline_cells,
    budget_audit,
    failed_row,
    frips_cells,
    load_config,
    probe_cells,
    probe_settings,
    rows_to_csv,
    run_cell,
    run_probe_cell,
    summarise,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


def _guarded_cell(args):
    cfg, cell = args
    try:
        return run_cell(cfg, cell), None
    except Exception:
        return failed_row(cfg, cell), traceback.format_exc()


def _guarded_probe(args):
    cfg, cell = args
    try:
        return run_probe_cell(cfg, cell), None
    except Exception:
        nan = float("nan")
        ps = probe_settings(cfg)
        return ProbeRow(cfg.config_hash, ps["method"], cell.t, cell.component, nan, 0, 0, nan), traceback.format_exc()


def _map(fn, cfg, cells, workers):
    jobs = [(cfg, c) for c in cells]
    if workers <= 1 or len(jobs) <= 1:
        results = [fn(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, jobs))
    rows = []
    for row, err in results:
        if err is not None:
            print(f"cell failed: {row}\n{err}", file=sys.stderr)
        rows.append(row)
    return rows


def _with_seed(cfg, seed):
    if seed is None:
        return cfg
    raw = copy.deepcopy(cfg.raw)
    raw["experiment"]["seed"] = seed
    return replace(cfg, seed=seed, raw=raw)


def _paths(out):
    root, ext = os.path.splitext(out)
    csv_path = out if ext == ".csv" else out + ".csv"
    return csv_path, os.path.splitext(csv_path)[0] + ".json"


def _write(out, csv_text, summary):
    csv_path, json_path = _paths(out)
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    return csv_path, json_path


def run_experiment(cfg, workers=1, out=None):
    """Run every cell; returns ``(rows, summary, exit_code)`` and writes CSV + JSON to ``out``."""
    frips_rows = _map(_guarded_cell, cfg, frips_cells(cfg), workers)
    base_rows = _map(_guarded_cell, cfg, baseline_cells(cfg, frips_rows), workers)
    rows = frips_rows + base_rows
    t_index = {t: i for i, t in enumerate(cfg.t0_grid)}
    rows.sort(key=lambda r: (METHODS.index(r.method), t_index.get(r.t0, -1), r.repetition))
    summary = summarise(cfg, rows)
    ratio = budget_audit(rows)
    summary["budget_within_1pct"] = bool(ratio <= 1.01) if not math.isnan(ratio) else None
    if out is not None:
        _write(out, rows_to_csv(rows, ResultRow), summary)
    failed = all(math.isnan(r.w_hat) for r in rows)
    return rows, summary, EXIT_ABORT if failed else EXIT_OK


def run_probe(cfg, workers=1, out=None):
    """Return-accuracy sweep; returns ``(rows, metadata, exit_code)``."""
    rows = _map(_guarded_probe, cfg, probe_cells(cfg), workers)
    ps = probe_settings(cfg)
    meta = {
        "experiment": cfg.name,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "balanced": ps["balanced"],
        "n_blind": ps["n_blind"],
        "method": ps["method"],
        "t_grid": list(ps["t_grid"]),
        "tau": [
            {"t": r.t, "component": r.component, "tau": None if math.isnan(r.tau) else r.tau} for r in rows
        ],
    }
    if out is not None:
        _write(out, rows_to_csv(rows, ProbeRow), meta)
    failed = all(math.isnan(r.tau) for r in rows)
    return rows, meta, EXIT_ABORT if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="frips", description="Batch sampler experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "run all (method, t0, repetition) cells"),
        ("probe", "return-accuracy sweep over a time grid"),
        ("validate", "check a configuration without running it"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _with_seed(load_config(args.config), args.seed)
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        n_frips = len(frips_cells(cfg))
        n_base = sum(m not in METHODS[:3] for m in cfg.methods) * cfg.repetitions
        print(f"{cfg.name}: ok ({n_frips} FRIPS cells, {n_base} baseline cells, hash {cfg.config_hash})")
        return EXIT_OK
    if args.command == "probe":
        if "probe" not in cfg.raw:
            print(f"{args.config}: no [probe] section", file=sys.stderr)
            return EXIT_CONFIG
        out = args.out or os.path.splitext(cfg.output)[0] + "-probe.csv"
        rows, _, code = run_probe(cfg, args.workers, out)
        for r in rows:
            print(f"t={r.t:.3f} component={r.component} tau={r.tau:.4f}")
        return code
    out = args.out or cfg.output
    rows, summary, code = run_experiment(cfg, args.workers, out)
    for g in summary["groups"]:
        rel = g["rel_err"]
        rel_txt = "n/a" if rel is None else f"{100 * rel['mean']:.2f}% +- {100 * rel['sd']:.2f}%"
        print(f"{g['method']:<11} t0={g['t0']}  rel_err {rel_txt}")
    print(f"budget ratio {summary['budget_ratio']:.4f}; results in {_paths(out)[0]}")
    return code


if __name__ == "__main__":
    sys.exit(main())
