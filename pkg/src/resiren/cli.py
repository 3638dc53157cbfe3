"""``resiren`` command line: gen, pretrain, embed, probe, analyze, scale.

Every option can come from ``--config FILE`` (JSON, keys named like the options
with underscores) or from flags; flags win. A ``manifest.json`` from an earlier
run is also accepted as a config, which replays that run. All randomness flows
from ``--seed``, fanned out into named sub-seeds that can be pinned one by one
(``--grid-seed``, ``--init-seed``, ``--train-seed``, ``--task-seed``,
``--probe-seed``).

Failures exit nonzero and print a single JSON line on stderr::

    {"command": "pretrain", "error": "missing_file", "message": "..."}
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from ._binary import FormatError, VersionError
from .analysis import (ABLATION_ROWS, SWEEP_MODES, export_prediction_grid, reconstruction_error, run_ablations,
                       scaling_sweep, task_policy, write_scaling_csv)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import fit_normalization, generate_synthetic_climatology, load_grid, save_grid
from .encoding import EncodingError
from .net import NetworkConfig
from .presets import ABLATION_TRAIN, DESK_GRID, DESK_NET, DESK_TASKS, DESK_TRAIN, SWEEP_TRAIN
from .probe import BASELINES, POLICIES, EmbeddingProvider, ProbeSpec, embed, fit_probe, embed_dataset
from .probe import background_bank, run_baseline_suite, run_probe_suite, write_reports_csv
from .rng import derive_seed
from .tasks import TaskDataset, build_biomes_task, build_sdm_task, build_traits_task
from .train import TrainConfig, pretrain, write_history_csv

SUB_SEEDS = ("grid", "init", "train", "task", "probe")
TASKS = ("biomes", "sdm", "traits")
MANIFEST = "manifest.json"

EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: Dict[str, int]
    inputs: Dict[str, str]
    outputs: List[str]
    version: str = __version__
    wallclock_s: float = 0.0
    platform: str = field(default_factory=platform.platform)

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, MANIFEST)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


# -- option tables ---------------------------------------------------------

_NET = {k: v for k, v in DESK_NET.to_dict().items() if k not in ("input_dim", "output_dim")}
_TRAIN = {
    "epochs": DESK_TRAIN.max_epochs,
    "batch_size": DESK_TRAIN.batch_size,
    "learning_rate": DESK_TRAIN.learning_rate,
    "early_stopping": True,
    "patience": DESK_TRAIN.patience,
    "min_delta": DESK_TRAIN.min_delta,
}
_TASK = {"task": "biomes", "dataset": None, "kind": None, **{k: v for t in DESK_TASKS.values() for k, v in t.items()}}
_PROBE = {"probe": "linear", "n_inits": 10, "probe_epochs": 100, "probe_lr": 1e-3, "probe_batch_size": 64}

DEFAULTS = {
    "gen": {**DESK_GRID, "land_fraction": 0.6},
    "pretrain": {"grid": None, **_NET, **_TRAIN, "march_only": False, "concat_months": False},
    "embed": {"checkpoint": None, "points": None, "months": "seasonal", "epoch": None},
    "probe": {"grid": None, "checkpoint": None, "months": None, "baseline": None, "epoch": None, **_TASK, **_PROBE},
    "analyze": {"grid": None, "checkpoint": None, "n_locations": 100000, "cells": [136, 320],
                "export_task": "sdm", "export_month": 3, "export_output": 0, "resolution": [90, 180],
                "region": None, **{k: v for k, v in _TASK.items() if k != "task"}, **_PROBE},
    "scale": {"grid": None, "sweep": True, "ablations": False, "depths": [2, 4, 8, 16, 32],
              "modes": list(SWEEP_MODES), "seeds": [0, 1, 2], "probe_task": None, "rows": list(ABLATION_ROWS),
              **_NET, "sweep_epochs": SWEEP_TRAIN.max_epochs, "sweep_lr": SWEEP_TRAIN.learning_rate,
              "ablation_epochs": ABLATION_TRAIN.max_epochs, "batch_size": DESK_TRAIN.batch_size,
              "learning_rate": DESK_TRAIN.learning_rate, **{k: v for k, v in _TASK.items() if k != "task"},
              **_PROBE},
}

_INPUT_KEYS = ("grid", "checkpoint", "points", "dataset")


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> List[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _opt(p, name, **kw):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=argparse.SUPPRESS, **kw)


def _common(p):
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--config", default=None, help="JSON config or an earlier manifest.json")
    _opt(p, "seed", type=int, help="master seed")
    for s in SUB_SEEDS:
        _opt(p, f"{s}_seed", type=int)


def _net_opts(p):
    _opt(p, "depth", type=int)
    _opt(p, "hidden_dim", type=int)
    _opt(p, "embedding_dim", type=int)
    _opt(p, "omega0", type=float)
    _opt(p, "residual", choices=["off", "half", "sqrt2"])
    _opt(p, "first_layer", choices=["hsiren", "sine"])


def _task_opts(p, with_task=True):
    if with_task:
        _opt(p, "task", choices=TASKS)
    _opt(p, "dataset", help="task CSV instead of a synthetic task")
    _opt(p, "kind", choices=["classification", "sdm", "regression"])
    for k in ("n_points", "n_classes", "n_species", "n_occurrences", "n_targets"):
        _opt(p, k, type=int)


def _probe_opts(p):
    _opt(p, "probe", choices=["linear", "mlp"])
    _opt(p, "n_inits", type=int)
    _opt(p, "probe_epochs", type=int)
    _opt(p, "probe_lr", type=float)
    _opt(p, "probe_batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resiren", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"resiren {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic normalized climatology grid")
    _common(p)
    _opt(p, "width", type=int)
    _opt(p, "height", type=int)
    _opt(p, "n_vars", type=int)
    _opt(p, "land_fraction", type=float)

    p = sub.add_parser("pretrain", help="fit a ReSIREN to a grid")
    _common(p)
    _opt(p, "grid")
    _net_opts(p)
    _opt(p, "epochs", type=int)
    _opt(p, "batch_size", type=int)
    _opt(p, "learning_rate", type=float)
    _opt(p, "early_stopping", type=_bool)
    _opt(p, "patience", type=int)
    _opt(p, "min_delta", type=float)
    _opt(p, "march_only", action="store_true")
    _opt(p, "concat_months", action="store_true")

    p = sub.add_parser("embed", help="embed the points of a CSV (lon_deg, lat_deg[, month])")
    _common(p)
    _opt(p, "checkpoint")
    _opt(p, "points")
    _opt(p, "months", choices=list(POLICIES))
    _opt(p, "epoch", type=float)

    p = sub.add_parser("probe", help="probe embeddings (or train a from-scratch baseline) on a task")
    _common(p)
    _opt(p, "grid")
    _opt(p, "checkpoint")
    _opt(p, "months", choices=list(POLICIES))
    _opt(p, "baseline", choices=list(BASELINES))
    _opt(p, "epoch", type=float)
    _task_opts(p)
    _probe_opts(p)

    p = sub.add_parser("analyze", help="reconstruction errors and a probe prediction grid")
    _common(p)
    _opt(p, "grid")
    _opt(p, "checkpoint")
    _opt(p, "n_locations", type=int)
    _opt(p, "cells", type=_int_list, help="ROWS,COLS")
    _opt(p, "export_task", choices=list(TASKS) + ["none"])
    _opt(p, "export_month", type=int)
    _opt(p, "export_output", type=int)
    _opt(p, "resolution", type=_int_list, help="ROWS,COLS")
    _opt(p, "region", type=_float_list, help="LON_MIN,LON_MAX,LAT_MIN,LAT_MAX")
    _task_opts(p, with_task=False)
    _probe_opts(p)

    p = sub.add_parser("scale", help="depth sweep and ablation table")
    _common(p)
    _opt(p, "grid")
    _opt(p, "sweep", type=_bool)
    _opt(p, "ablations", type=_bool)
    _opt(p, "depths", type=_int_list)
    _opt(p, "modes", type=_str_list)
    _opt(p, "seeds", type=_int_list)
    _opt(p, "probe_task", choices=TASKS)
    _opt(p, "rows", type=_str_list)
    _net_opts(p)
    _opt(p, "sweep_epochs", type=int)
    _opt(p, "sweep_lr", type=float)
    _opt(p, "ablation_epochs", type=int)
    _opt(p, "batch_size", type=int)
    _opt(p, "learning_rate", type=float)
    _task_opts(p, with_task=False)
    _probe_opts(p)
    return parser


# -- helpers ---------------------------------------------------------------


def _load_config(path: Optional[str], command: str) -> dict:
    if path is None:
        return {}
    data = _read_json(path)
    if not isinstance(data, dict):
        raise CliError("bad_config", f"{path}: expected a JSON object")
    if "command" in data and "config" in data:
        if data["command"] != command:
            raise CliError("bad_config", f"{path} is a manifest for {data['command']!r}, not {command!r}")
        data = data["config"]
    unknown = sorted(set(data) - set(DEFAULTS[command]) - {"seed"} - {f"{s}_seed" for s in SUB_SEEDS})
    if unknown:
        raise CliError("bad_config", f"unknown config keys for {command}: {', '.join(unknown)}", EXIT_USAGE)
    return data


def _read_json(path):
    _require_file(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError("bad_config", f"{path}: {exc}")


def _require_file(path) -> None:
    if path is None:
        raise CliError("missing_argument", "a required input path was not given", EXIT_USAGE)
    if not os.path.isfile(path):
        raise CliError("missing_file", f"no such file: {path}", EXIT_MISSING)


def _need(cfg: dict, key: str):
    if cfg.get(key) is None:
        raise CliError("missing_argument", f"--{key.replace('_', '-')} is required", EXIT_USAGE)
    return cfg[key]


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = {"seed": 0, **{f"{s}_seed": None for s in SUB_SEEDS}, **DEFAULTS[cmd]}
    cfg.update(_load_config(args.config, cmd))
    given = {k: v for k, v in vars(args).items() if k not in ("command", "out", "config")}
    cfg.update(given)
    return cfg


def seeds_of(cfg: dict) -> Dict[str, int]:
    out = {"seed": int(cfg["seed"])}
    for s in SUB_SEEDS:
        pinned = cfg.get(f"{s}_seed")
        out[s] = int(pinned) if pinned is not None else derive_seed(int(cfg["seed"]), s)
    return out


def _net_cfg(cfg: dict) -> NetworkConfig:
    return replace(DESK_NET, **{k: cfg[k] for k in _NET})


def _grid(cfg: dict):
    path = _need(cfg, "grid")
    _require_file(path)
    grid = load_grid(path)
    if not grid.is_normalized:
        grid = fit_normalization(grid)
    return grid


def _checkpoint(cfg: dict):
    path = _need(cfg, "checkpoint")
    _require_file(path)
    return load_checkpoint(path)


def _probe_spec(cfg: dict, task_kind: str) -> ProbeSpec:
    return ProbeSpec(kind=cfg["probe"], task=task_kind, learning_rate=cfg["probe_lr"], epochs=cfg["probe_epochs"],
                     batch_size=cfg["probe_batch_size"], n_inits=cfg["n_inits"])


def build_task(name: str, grid, cfg: dict, seed: int) -> TaskDataset:
    if name == "biomes":
        return build_biomes_task(grid, cfg["n_points"], cfg["n_classes"], seed=seed)
    if name == "sdm":
        return build_sdm_task(grid, cfg["n_species"], cfg["n_occurrences"], seed=seed)
    if name == "traits":
        return build_traits_task(grid, cfg["n_points"], cfg["n_targets"], seed=seed)
    raise CliError("usage", f"unknown task {name!r}", EXIT_USAGE)


def _task(cfg: dict, grid, seeds, name: Optional[str]) -> TaskDataset:
    if cfg.get("dataset"):
        _require_file(cfg["dataset"])
        return TaskDataset.from_csv(cfg["dataset"], kind=cfg.get("kind"))
    return build_task(name, grid, cfg, seeds["task"])


def read_points(path: str):
    """``(lon, lat, month or None)`` from a CSV with ``lon_deg``, ``lat_deg`` and optional ``month``."""
    _require_file(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lon_deg", "lat_deg"} <= set(reader.fieldnames):
            raise CliError("bad_input", f"{path}: needs lon_deg and lat_deg columns")
        rows = list(reader)
    try:
        lon = np.array([float(r["lon_deg"]) for r in rows])
        lat = np.array([float(r["lat_deg"]) for r in rows])
        month = np.array([int(r["month"]) for r in rows]) if "month" in reader.fieldnames else None
    except ValueError as exc:
        raise CliError("bad_input", f"{path}: {exc}")
    return lon, lat, month


# -- commands --------------------------------------------------------------

Outputs = List[str]


def cmd_gen(cfg: dict, seeds: dict, out: str) -> Outputs:
    grid = generate_synthetic_climatology(cfg["width"], cfg["height"], cfg["n_vars"], seeds["grid"],
                                          land_fraction=cfg["land_fraction"])
    path = os.path.join(out, "grid.cgrd")
    save_grid(path, fit_normalization(grid))
    return [path]


def cmd_pretrain(cfg: dict, seeds: dict, out: str) -> Outputs:
    grid = _grid(cfg)
    tcfg = TrainConfig(learning_rate=cfg["learning_rate"], max_epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       patience=cfg["patience"], min_delta=cfg["min_delta"], early_stopping=cfg["early_stopping"],
                       seed=seeds["train"], init_seed=seeds["init"], march_only=cfg["march_only"],
                       concat_months=cfg["concat_months"])
    ckpt, history = pretrain(grid, _net_cfg(cfg), tcfg)
    paths = [os.path.join(out, "model.rsrn"), os.path.join(out, "loss.csv")]
    save_checkpoint(paths[0], ckpt)
    write_history_csv(paths[1], history)
    return paths


def cmd_embed(cfg: dict, seeds: dict, out: str) -> Outputs:
    ckpt = _checkpoint(cfg)
    lon, lat, month = read_points(_need(cfg, "points"))
    provider = EmbeddingProvider(ckpt, cfg["months"], epoch=cfg["epoch"])
    feats = embed(provider, lon, lat, month)
    path = os.path.join(out, "embeddings.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lon_deg", "lat_deg", "month"] + [f"f{k}" for k in range(feats.shape[1])])
        for i in range(lon.size):
            m = 0 if month is None else int(month[i])
            w.writerow([repr(float(lon[i])), repr(float(lat[i])), m] + [repr(float(v)) for v in feats[i]])
    return [path]


def cmd_probe(cfg: dict, seeds: dict, out: str) -> Outputs:
    grid = _grid(cfg) if cfg.get("grid") is not None else None
    if grid is None and (cfg.get("dataset") is None or cfg.get("baseline")):
        _need(cfg, "grid")
    ds = _task(cfg, grid, seeds, cfg["task"])
    spec = _probe_spec(cfg, ds.kind)
    if cfg.get("baseline"):
        report = run_baseline_suite(cfg["baseline"], grid, ds, spec, seed=seeds["probe"])
    else:
        ckpt = _checkpoint(cfg)
        policy = cfg["months"] or task_policy(ds)
        provider = EmbeddingProvider(ckpt, policy, epoch=cfg["epoch"])
        if ds.kind == "sdm" and grid is None:
            _need(cfg, "grid")
        report = run_probe_suite(provider, ds, spec, grid, seeds["probe"])
    paths = [os.path.join(out, n) for n in ("report.json", "report.csv", "dataset.csv")]
    report.to_json(paths[0])
    write_reports_csv(paths[1], [report])
    ds.to_csv(paths[2])
    return paths


def cmd_analyze(cfg: dict, seeds: dict, out: str) -> Outputs:
    grid = _grid(cfg)
    ckpt = _checkpoint(cfg)
    cells = tuple(cfg["cells"])
    if len(cells) != 2:
        raise CliError("usage", "--cells takes ROWS,COLS", EXIT_USAGE)
    n_loc = min(int(cfg["n_locations"]), int(grid.land_index.size))
    report = reconstruction_error(ckpt, grid, n_loc, seeds["probe"], cells=cells)
    paths = report.write(out)
    if cfg["export_task"] != "none":
        ds = _task(cfg, grid, seeds, cfg["export_task"])
        provider = EmbeddingProvider(ckpt, task_policy(ds))
        spec = _probe_spec(cfg, ds.kind)
        feats = embed_dataset(provider, ds)
        bank = background_bank(provider, grid, spec.n_background, seeds["probe"]) if ds.kind == "sdm" else None
        model = fit_probe(feats, ds.targets, ds.split, spec, seeds["probe"], ds.n_classes, bank,
                          ds.month if ds.has_months else None)
        region = tuple(cfg["region"]) if cfg.get("region") else grid.extent
        resolution = tuple(cfg["resolution"])
        if len(resolution) != 2 or len(region) != 4:
            raise CliError("usage", "--resolution takes ROWS,COLS and --region four numbers", EXIT_USAGE)
        path = os.path.join(out, "prediction_grid.csv")
        export_prediction_grid(provider, model, region, resolution, cfg["export_month"], cfg["export_output"], path)
        paths.append(path)
    return paths


def cmd_scale(cfg: dict, seeds: dict, out: str) -> Outputs:
    grid = _grid(cfg)
    net = _net_cfg(cfg)
    run_seeds = [int(s) for s in cfg["seeds"]]
    paths = []
    if cfg["sweep"]:
        task = None
        if cfg.get("probe_task"):
            task = _task(cfg, grid, seeds, cfg["probe_task"])
        tcfg = replace(SWEEP_TRAIN, max_epochs=cfg["sweep_epochs"], learning_rate=cfg["sweep_lr"],
                       batch_size=cfg["batch_size"], init_seed=None)
        spec = _probe_spec(cfg, task.kind) if task is not None else None
        results = scaling_sweep(grid, cfg["depths"], cfg["modes"], run_seeds, task, net, tcfg, spec)
        paths += [os.path.join(out, "scaling.csv"), os.path.join(out, "scaling.json")]
        write_scaling_csv(paths[-2], results)
        with open(paths[-1], "w") as fh:
            json.dump([asdict(r) for r in results], fh, indent=2, sort_keys=True)
            fh.write("\n")
    if cfg["ablations"]:
        tasks = [_task(cfg, grid, seeds, name) for name in TASKS]
        tcfg = replace(ABLATION_TRAIN, max_epochs=cfg["ablation_epochs"], batch_size=cfg["batch_size"],
                       learning_rate=cfg["learning_rate"])
        table = run_ablations(grid, tasks, net, tcfg, cfg["rows"], run_seeds, cfg["probe"], cfg["n_inits"])
        paths += [os.path.join(out, "ablations.csv"), os.path.join(out, "ablations.json")]
        table.write_csv(paths[-2])
        table.to_json(paths[-1])
    if not paths:
        raise CliError("usage", "nothing to do: enable --sweep or --ablations", EXIT_USAGE)
    return paths


COMMANDS: Dict[str, Callable[[dict, dict, str], Outputs]] = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
    "scale": cmd_scale,
}


def run(argv: Optional[List[str]] = None) -> RunManifest:
    """Parse, resolve and execute one command; raises ``CliError`` on failure."""
    args = build_parser().parse_args(argv)
    cfg = resolve(args)
    seeds = seeds_of(cfg)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](cfg, seeds, args.out)
    except CliError:
        raise
    except FileNotFoundError as exc:
        raise CliError("missing_file", str(exc), EXIT_MISSING)
    except VersionError as exc:
        raise CliError("version_mismatch", str(exc), EXIT_FORMAT)
    except FormatError as exc:
        raise CliError("bad_format", str(exc), EXIT_FORMAT)
    except EncodingError as exc:
        raise CliError("bad_input", str(exc))
    except (ValueError, FloatingPointError) as exc:
        raise CliError("invalid", str(exc))
    inputs = {k: os.path.abspath(cfg[k]) for k in _INPUT_KEYS if cfg.get(k)}
    manifest = RunManifest(args.command, cfg, seeds, inputs, [os.path.basename(p) for p in outputs],
                           wallclock_s=time.perf_counter() - t0)
    manifest.write(args.out)
    return manifest


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    command = next((a for a in argv if a in COMMANDS), None)
    try:
        run(argv)
    except CliError as exc:
        err = {"command": command, "error": exc.kind, "message": _one_line(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
