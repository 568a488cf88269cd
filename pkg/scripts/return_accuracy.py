"""Return accuracy tau_i(t) of mode-blind trajectories on the d=4 sphere."""

import argparse

from frips.experiment import load_config
from frips.studies import cached_probe, probe_table, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default="configs/sphere_d4.toml")
    ap.add_argument("--cache", default="results/cache")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    tau = probe_table(cached_probe(load_config(args.config), args.cache, args.workers))
    for (t, comp), v in sorted(tau.items()):
        print(f"t={t:<5g} component {comp}  tau {v:.3f}")
    write_json("results/return_accuracy.json", {f"{t}:{c}": v for (t, c), v in sorted(tau.items())})


if __name__ == "__main__":
    main()
