"""d=4 sphere table: swept t0 for FRIPS-MALA and FRIPS-IS, full runs, matched direct-MALA baseline."""

import argparse

from frips.experiment import load_config
from frips.studies import d4_table, method_wall_time, summary_table, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default="configs/sphere_d4.toml")
    ap.add_argument("--cache", default="results/cache")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    result = d4_table(load_config(args.config), args.cache, args.workers)
    for line in summary_table(result):
        print(line)
    wall = {m: method_wall_time(result, m) for m in ("FRIPS-MALA", "FRIPS-IS", "MALA")}
    print("wall time (s): " + ", ".join(f"{m} {w:.0f}" for m, w in wall.items()))
    write_json("results/table1_d4.json", {"best_t0": result.best, "summary": summary_table(result), "wall_time": wall})


if __name__ == "__main__":
    main()
