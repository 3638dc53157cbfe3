"""Depth sweep of plain SIREN vs ReSIREN on a desk grid; writes scaling.csv and a summary."""

import argparse
import os

import numpy as np

from resiren.analysis import median_loss, scaling_sweep, write_scaling_csv
from resiren.data import fit_normalization, generate_synthetic_climatology
from resiren.presets import DESK_GRID


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/scaling")
    ap.add_argument("--depths", default="2,4,8,16,32")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--grid-seed", type=int, default=0)
    args = ap.parse_args()
    depths = [int(d) for d in args.depths.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    os.makedirs(args.out, exist_ok=True)

    grid = fit_normalization(generate_synthetic_climatology(DESK_GRID["width"], DESK_GRID["height"],
                                                            DESK_GRID["n_vars"], args.grid_seed))
    results = scaling_sweep(grid, depths, seeds=seeds)
    write_scaling_csv(os.path.join(args.out, "scaling.csv"), results)
    print(f"{'depth':>5}  {'siren':>8}  {'resiren':>8}  {'wall siren':>10}  {'wall resiren':>12}")
    for d in depths:
        wall = {m: np.median([r.wallclock_s for r in results if r.depth == d and r.mode == m])
                for m in ("siren", "resiren")}
        print(f"{d:>5}  {median_loss(results, d, 'siren'):8.4f}  {median_loss(results, d, 'resiren'):8.4f}  "
              f"{wall['siren']:10.2f}  {wall['resiren']:12.2f}")


if __name__ == "__main__":
    main()
