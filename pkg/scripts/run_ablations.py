"""Ablation table on the three synthetic tasks (medians over seeds); writes ablations.csv/json."""

import argparse
import os

from resiren.analysis import ABLATION_ROWS, run_ablations
from resiren.cli import build_task
from resiren.data import fit_normalization, generate_synthetic_climatology
from resiren.presets import ABLATION_TRAIN, DESK_GRID, DESK_NET, DESK_TASKS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--rows", default=",".join(ABLATION_ROWS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--grid-seed", type=int, default=0)
    ap.add_argument("--task-seed", type=int, default=0)
    ap.add_argument("--probe", choices=["linear", "mlp"], default="linear")
    ap.add_argument("--n-inits", type=int, default=10)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    grid = fit_normalization(generate_synthetic_climatology(DESK_GRID["width"], DESK_GRID["height"],
                                                            DESK_GRID["n_vars"], args.grid_seed))
    sizes = {k: v for t in DESK_TASKS.values() for k, v in t.items()}
    tasks = [build_task(name, grid, sizes, args.task_seed) for name in ("biomes", "sdm", "traits")]
    table = run_ablations(grid, tasks, DESK_NET, ABLATION_TRAIN, args.rows.split(","),
                          [int(s) for s in args.seeds.split(",")], args.probe, args.n_inits)
    table.write_csv(os.path.join(args.out, "ablations.csv"))
    table.to_json(os.path.join(args.out, "ablations.json"))
    print(f"{'ablation':<15}" + "".join(f"{t:>16}" for t in table.tasks))
    for row in table.rows:
        cells = "".join(f"{row.metrics[t]:16.3f}" if t in row.metrics else f"{row.status:>16}" for t in table.tasks)
        print(f"{row.name:<15}{cells}")


if __name__ == "__main__":
    main()
