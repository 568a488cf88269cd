"""Student mixture in R^4: Euclidean against sphere-lifted FRIPS over a t0 grid, with matched MALA baselines."""

import argparse

from frips.experiment import load_config
from frips.studies import grid_study, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="*", default=["configs/student_euclid.toml", "configs/student_sphere.toml"])
    ap.add_argument("--cache", default="results/cache")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    report = {}
    for path in args.configs:
        cfg = load_config(path)
        study = grid_study(cfg, args.cache, workers=args.workers)
        entry = {}
        for metric in ("rel_err", "msle"):
            t0 = study.best[("FRIPS-MALA", metric)]
            entry[metric] = {
                "best_t0": t0,
                "frips": study.at_best("FRIPS-MALA", metric),
                "mala": study.baseline("MALA", metric),
            }
            print(f"{cfg.name:<15} {metric:<8} best t0 {t0:<5g} FRIPS {entry[metric]['frips']:.4f}  MALA {entry[metric]['mala']:.4f}")
        report[cfg.name] = entry
    write_json("results/student_study.json", report)


if __name__ == "__main__":
    main()
