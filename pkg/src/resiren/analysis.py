"""Reconstruction-error analysis, depth sweeps, ablation tables and prediction-grid export."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint
from .data import MONTHS, ClimGrid
from .encoding import encode_batch
from .net import Activation, NetworkConfig, Residual, forward
from .probe import (EmbeddingProvider, ProbeModel, ProbeReport, ProbeSpec, embed, map_jobs, run_probe_suite)
from .presets import DESK_NET, SWEEP_TRAIN
from .rng import derive_seed
from .tasks import TaskDataset, sample_land_points
from .train import TrainConfig, pretrain

DEFAULT_CELLS = (136, 320)
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
LOG_EPS = 1e-6
DEFAULT_DEPTHS = (2, 4, 8, 16, 32)
SWEEP_MODES = {"siren": Residual.OFF, "resiren": Residual.HALF}

Predictor = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def task_policy(ds: TaskDataset, policy: str = "latent") -> str:
    """Month policy for a task: observation month for dated records, seasonal stack otherwise."""
    if policy == "rec":
        return "rec"
    return "obs" if ds.has_months else "seasonal"


# -- reconstruction error --------------------------------------------------


def checkpoint_predictor(ckpt: Checkpoint, batch_size: int = 4096) -> Predictor:
    """``(lon, lat, month) -> (n, V)`` normalized reconstructions from a checkpoint head."""
    cfg, params = ckpt.config, ckpt.params
    if cfg.output_dim < 1 or params.weights[-1].size == 0:
        raise ValueError("checkpoint has no reconstruction head")
    n_vars = ckpt.norm_mean.size

    def predict(lon, lat, month):
        outs = []
        for s in range(0, lon.size, batch_size):
            sl = slice(s, s + batch_size)
            if cfg.input_dim == 2:
                _, out, _ = forward(cfg, params, encode_batch(lon[sl], lat[sl], validate=False))
                out = out.reshape(out.shape[0], MONTHS, n_vars)[:, month - 1]
            else:
                _, out, _ = forward(cfg, params, encode_batch(lon[sl], lat[sl], month, validate=False))
            outs.append(out.astype(np.float64))
        return np.concatenate(outs, axis=0)

    return predict


@dataclass
class ErrorReport:
    """Absolute reconstruction errors in normalized space.

    ``cell_mae`` is NaN where no sampled location falls in the cell.
    """

    quantile_levels: Tuple[float, ...]
    var_quantiles: np.ndarray  # (V, len(quantile_levels))
    var_mae: np.ndarray  # (V,)
    var_mean_log: np.ndarray  # (V,) mean of log(err + eps)
    month_mae: np.ndarray  # (12,)
    month_counts: np.ndarray  # (12,) number of errors per month
    cell_mae: np.ndarray  # (rows, cols)
    cell_counts: np.ndarray  # (rows, cols)
    extent: Tuple[float, float, float, float]
    global_mae: float
    n_locations: int
    seed: int

    @property
    def cells(self) -> Tuple[int, int]:
        return self.cell_mae.shape

    def summary(self) -> dict:
        return {
            "global_mae": self.global_mae,
            "n_locations": self.n_locations,
            "seed": self.seed,
            "cells": list(self.cells),
            "extent": list(self.extent),
            "quantile_levels": list(self.quantile_levels),
            "var_quantiles": self.var_quantiles.tolist(),
            "var_mae": self.var_mae.tolist(),
            "var_mean_log": self.var_mean_log.tolist(),
            "month_mae": self.month_mae.tolist(),
            "month_counts": self.month_counts.tolist(),
        }

    def write(self, out_dir) -> List[str]:
        """Write ``errors.json``, ``errors_by_month.csv`` and ``cell_mae.csv``; returns the paths."""
        import os

        paths = [os.path.join(out_dir, n) for n in ("errors.json", "errors_by_month.csv", "cell_mae.csv")]
        with open(paths[0], "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["month", "mae", "count"])
            for m in range(MONTHS):
                w.writerow([m + 1, repr(float(self.month_mae[m])), int(self.month_counts[m])])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "lon", "lat", "mae", "count"])
            lon, lat = cell_centers(self.extent, self.cells)
            for r in range(self.cells[0]):
                for c in range(self.cells[1]):
                    w.writerow([r, c, repr(float(lon[c])), repr(float(lat[r])), repr(float(self.cell_mae[r, c])),
                                int(self.cell_counts[r, c])])
        return paths


def cell_centers(extent, cells):
    """Longitudes of cell columns and latitudes of cell rows (row 0 north)."""
    lon0, lon1, lat0, lat1 = extent
    rows, cols = cells
    lon = lon0 + (np.arange(cols) + 0.5) * (lon1 - lon0) / cols
    lat = lat1 - (np.arange(rows) + 0.5) * (lat1 - lat0) / rows
    return lon, lat


def cell_index(extent, cells, lon, lat) -> Tuple[np.ndarray, np.ndarray]:
    lon0, lon1, lat0, lat1 = extent
    rows, cols = cells
    c = np.floor((np.asarray(lon) - lon0) / (lon1 - lon0) * cols).astype(np.int64)
    r = np.floor((lat1 - np.asarray(lat)) / (lat1 - lat0) * rows).astype(np.int64)
    return np.clip(r, 0, rows - 1), np.clip(c, 0, cols - 1)


def cell_mean(extent, cells, lon, lat, values) -> Tuple[np.ndarray, np.ndarray]:
    """Per-cell mean of ``values`` (one per point) and point counts; NaN for empty cells."""
    r, c = cell_index(extent, cells, lon, lat)
    flat = r * cells[1] + c
    n = cells[0] * cells[1]
    sums = np.bincount(flat, weights=values, minlength=n)
    counts = np.bincount(flat, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return mean.reshape(cells), counts.reshape(cells)


def local_variance(grid: ClimGrid) -> np.ndarray:
    """Per-pixel texture: half the mean squared difference to the 4-neighbours, in normalized units.

    Averaged over months and variables; shape ``(H, W)``.
    """
    if not grid.is_normalized:
        raise ValueError("fit_normalization must run first")
    norm = (grid.values.astype(np.float64) - grid.mean[None, :, None, None]) / grid.std[None, :, None, None]
    dx = (np.diff(norm, axis=3) ** 2).mean(axis=(0, 1))
    dy = (np.diff(norm, axis=2) ** 2).mean(axis=(0, 1))
    total = np.zeros((grid.height, grid.width))
    count = np.zeros_like(total)
    for d, a, b in ((dx, np.s_[:, 1:], np.s_[:, :-1]), (dy, np.s_[1:], np.s_[:-1])):
        total[a] += d
        total[b] += d
        count[a] += 1
        count[b] += 1
    return 0.5 * total / count


def cell_local_variance(grid: ClimGrid, cells) -> np.ndarray:
    """Mean ``local_variance`` of the land pixels in each cell; NaN where a cell has no land."""
    rows, cols = np.divmod(grid.land_index, grid.width)
    lon, lat = grid.land_lonlat
    return cell_mean(grid.extent, cells, lon, lat, local_variance(grid)[rows, cols])[0]


def reconstruction_error(
    model: Union[Checkpoint, Predictor],
    grid: ClimGrid,
    n_locations: int,
    seed: int = 0,
    cells: Tuple[int, int] = DEFAULT_CELLS,
    quantiles: Sequence[float] = QUANTILES,
) -> ErrorReport:
    """|prediction - truth| at ``n_locations`` land pixels for all 12 months.

    ``model`` is a checkpoint with a reconstruction head, or any predictor
    ``(lon, lat, month) -> (n, V)`` in normalized space. Locations are drawn without
    replacement while the land mask allows it.
    """
    if n_locations < 1:
        raise ValueError("n_locations must be >= 1")
    predict = checkpoint_predictor(model) if isinstance(model, Checkpoint) else model
    n_land = grid.land_index.size
    pos, lon, lat = sample_land_points(grid, n_locations, derive_seed(seed, "error-locations"),
                                       replace=n_locations > n_land, jitter=False)
    truth = grid.lookup(lon, lat)  # (n, 12, V), float64
    err = np.empty_like(truth)
    for m in range(1, MONTHS + 1):
        pred = np.asarray(predict(lon, lat, m), dtype=np.float64)
        if pred.shape != truth[:, m - 1].shape:
            raise ValueError(f"predictor returned {pred.shape}, expected {truth[:, m - 1].shape}")
        err[:, m - 1] = np.abs(pred - truth[:, m - 1])
    per_var = err.reshape(-1, err.shape[2])
    per_loc = err.mean(axis=(1, 2))
    cell_mae, cell_counts = cell_mean(grid.extent, cells, lon, lat, per_loc)
    return ErrorReport(
        quantile_levels=tuple(float(q) for q in quantiles),
        var_quantiles=np.quantile(per_var, quantiles, axis=0).T,
        var_mae=per_var.mean(axis=0),
        var_mean_log=np.log(per_var + LOG_EPS).mean(axis=0),
        month_mae=err.mean(axis=(0, 2)),
        month_counts=np.full(MONTHS, err.shape[0] * err.shape[2], dtype=np.int64),
        cell_mae=cell_mae,
        cell_counts=cell_counts,
        extent=tuple(float(v) for v in grid.extent),
        global_mae=float(err.mean()),
        n_locations=int(n_locations),
        seed=int(seed),
    )


# -- depth sweep -----------------------------------------------------------


@dataclass
class ScalingResult:
    depth: int
    mode: str
    seed: int
    final_loss: float
    probe_metric: Optional[float]
    wallclock_s: float
    steps: int
    config: dict = field(default_factory=dict)

    def row(self) -> list:
        pm = "" if self.probe_metric is None else repr(self.probe_metric)
        return [self.depth, self.mode, self.seed, repr(self.final_loss), pm, f"{self.wallclock_s:.3f}", self.steps]


SCALING_HEADER = ["depth", "mode", "seed", "final_loss", "probe_metric", "wallclock_s", "steps"]


def scaling_sweep(
    grid: ClimGrid,
    depths: Sequence[int] = DEFAULT_DEPTHS,
    modes: Sequence[str] = tuple(SWEEP_MODES),
    seeds: Sequence[int] = (0, 1, 2),
    task: Optional[TaskDataset] = None,
    net_cfg: Optional[NetworkConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    probe_spec: Optional[ProbeSpec] = None,
) -> List[ScalingResult]:
    """Pretrain every (depth, mode, seed) cell with an identical step budget.

    Early stopping is disabled so all cells take the same number of optimizer steps.
    ``final_loss`` is the mean training loss of the last epoch. With a ``task`` each
    checkpoint is also probed on its embeddings.
    """
    for m in modes:
        if m not in SWEEP_MODES:
            raise ValueError(f"mode must be one of {tuple(SWEEP_MODES)}")
    net_cfg = net_cfg or DESK_NET
    train_cfg = replace(train_cfg or SWEEP_TRAIN, early_stopping=False)
    cells = [(int(d), m, int(s)) for d in depths for m in modes for s in seeds]

    def one(cell):
        depth, mode, seed = cell
        cfg = replace(net_cfg, depth=depth, residual=SWEEP_MODES[mode])
        tcfg = replace(train_cfg, seed=seed)
        t0 = time.perf_counter()
        ckpt, history = pretrain(grid, cfg, tcfg)
        wall = time.perf_counter() - t0
        metric = None
        if task is not None:
            spec = probe_spec or ProbeSpec(task=task.kind)
            metric = run_probe_suite(EmbeddingProvider(ckpt, task_policy(task)), task, spec, grid, seed).mean
        return ScalingResult(depth, mode, seed, history[-1].mean_loss, metric, wall, int(ckpt.metadata["steps"]),
                             {"network": ckpt.config.to_dict(), "train": asdict(tcfg)})

    return map_jobs(one, cells)


def write_scaling_csv(path, results: Sequence[ScalingResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCALING_HEADER)
        for r in results:
            w.writerow(r.row())


def median_loss(results: Sequence[ScalingResult], depth: int, mode: str) -> float:
    vals = [r.final_loss for r in results if r.depth == depth and r.mode == mode]
    if not vals:
        raise KeyError((depth, mode))
    return float(np.median(vals))


# -- ablations -------------------------------------------------------------

OUT_OF_SCOPE_ROWS = ("contrastive", "era5")
ABLATION_ROWS = ("full", "siren", "concat_months", "march_only", "no_hsiren", "rec_values") + OUT_OF_SCOPE_ROWS


@dataclass(frozen=True)
class AblationVariant:
    """How a row changes the base run: network/training overrides and the embedding policy."""

    name: str
    net: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    policy: str = "latent"  # "latent" (embeddings) | "rec" (head outputs)

    def configs(self, net_cfg: NetworkConfig, train_cfg: TrainConfig) -> Tuple[NetworkConfig, TrainConfig]:
        return replace(net_cfg, **self.net), replace(train_cfg, **self.train)


VARIANTS = {
    "full": AblationVariant("full"),
    "siren": AblationVariant("siren", net={"residual": Residual.OFF}),
    "concat_months": AblationVariant("concat_months", train={"concat_months": True}),
    "march_only": AblationVariant("march_only", train={"march_only": True}),
    "no_hsiren": AblationVariant("no_hsiren", net={"first_layer": Activation.SINE}),
    "rec_values": AblationVariant("rec_values", policy="rec"),
}


@dataclass
class AblationRow:
    name: str
    status: str  # "ok" | "out of scope"
    metrics: Dict[str, float] = field(default_factory=dict)  # task kind -> median over seeds
    per_seed: Dict[str, List[float]] = field(default_factory=dict)
    reports: List[ProbeReport] = field(default_factory=list)


@dataclass
class AblationTable:
    rows: List[AblationRow]
    tasks: List[str]
    seeds: List[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def write_csv(self, path) -> None:
        from .probe import METRIC_OF_TASK

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ablation", "status"] + [f"{t}_{METRIC_OF_TASK[t]}" for t in self.tasks])
            for r in self.rows:
                w.writerow([r.name, r.status] + ["" if t not in r.metrics else repr(r.metrics[t]) for t in self.tasks])

    def to_json(self, path) -> None:
        data = {
            "tasks": self.tasks,
            "seeds": self.seeds,
            "rows": [{"name": r.name, "status": r.status, "metrics": r.metrics, "per_seed": r.per_seed}
                     for r in self.rows],
        }
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_ablations(
    grid: ClimGrid,
    tasks: Sequence[TaskDataset],
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    rows: Sequence[str] = ABLATION_ROWS,
    seeds: Sequence[int] = (0, 1, 2),
    probe_kind: str = "linear",
    n_inits: int = 10,
) -> AblationTable:
    """Pretrain each variant per seed, probe it on every task, and report seed medians.

    ``rec_values`` reuses the ``full`` checkpoint and probes its reconstructed
    variables. Rows without a runnable definition become "out of scope" placeholders.
    """
    for name in rows:
        if name not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation {name!r}")
    runnable = [n for n in rows if n in VARIANTS]
    ckpt_keys = sorted({("full" if n == "rec_values" else n, s) for n in runnable for s in seeds})

    def train_one(key):
        name, seed = key
        ncfg, tcfg = VARIANTS[name].configs(net_cfg, train_cfg)
        tcfg = replace(tcfg, seed=seed)
        return pretrain(grid, ncfg, tcfg)[0]

    ckpts = dict(zip(ckpt_keys, map_jobs(train_one, ckpt_keys)))
    out = []
    for name in rows:
        if name not in VARIANTS:
            out.append(AblationRow(name, "out of scope"))
            continue
        variant = VARIANTS[name]
        row = AblationRow(name, "ok")
        for ds in tasks:
            values = []
            for seed in seeds:
                ckpt = ckpts[("full" if name == "rec_values" else name, seed)]
                provider = EmbeddingProvider(ckpt, task_policy(ds, variant.policy), name=name)
                spec = ProbeSpec(kind=probe_kind, task=ds.kind, n_inits=n_inits)
                rep = run_probe_suite(provider, ds, spec, grid, seed)
                row.reports.append(rep)
                values.append(rep.mean)
            row.per_seed[ds.kind] = values
            row.metrics[ds.kind] = float(np.median(values))
        out.append(row)
    return AblationTable(out, [ds.kind for ds in tasks], list(seeds))


# -- prediction grids ------------------------------------------------------


@dataclass
class PredictionGrid:
    lon: np.ndarray  # (cols,)
    lat: np.ndarray  # (rows,), north first
    values: np.ndarray  # (rows, cols)
    month: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lon", "lat", "value"])
            for r, la in enumerate(self.lat):
                for c, lo in enumerate(self.lon):
                    w.writerow([repr(float(lo)), repr(float(la)), repr(float(self.values[r, c]))])


def export_prediction_grid(
    source: Union[Checkpoint, EmbeddingProvider],
    probe: Union[ProbeModel, Callable[[np.ndarray], np.ndarray]],
    region: Tuple[float, float, float, float] = (-180.0, 180.0, -90.0, 90.0),
    resolution: Tuple[int, int] = (90, 180),
    month: int = 3,
    output: int = 0,
    path=None,
) -> PredictionGrid:
    """Probe outputs over a regular ``(rows, cols)`` lon/lat lattice of cell centers.

    A bare checkpoint is embedded with the ``obs`` policy at ``month``. Classification
    probes export class ids, sdm probes the presence probability of species
    ``output``, regression probes target ``output``. A plain callable maps features
    to values (or to a matrix whose column ``output`` is taken).
    """
    rows, cols = resolution
    if rows < 1 or cols < 1:
        raise ValueError("resolution must be positive")
    lon0, lon1, lat0, lat1 = region
    if not (lon0 < lon1 and lat0 < lat1):
        raise ValueError("region must be (lon_min, lon_max, lat_min, lat_max)")
    provider = source if isinstance(source, EmbeddingProvider) else EmbeddingProvider(source, "obs")
    lon, lat = cell_centers(region, resolution)
    glon, glat = np.meshgrid(lon, lat)
    feats = embed(provider, glon.reshape(-1), glat.reshape(-1), np.full(glon.size, month))
    if isinstance(probe, ProbeModel):
        pred = probe.predict([feats])
    else:
        pred = np.asarray(probe(feats), dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[:, output]
    pred = np.broadcast_to(np.asarray(pred, dtype=np.float64), (glon.size,)).reshape(rows, cols)
    grid = PredictionGrid(lon, lat, np.array(pred), int(month))
    if path is not None:
        grid.write_csv(path)
    return grid
