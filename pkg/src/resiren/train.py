"""Climatic pretraining: MSE on the head, Adam, early stopping on training loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .encoding import encode_batch
from .data import MONTHS, ClimGrid, EpochPlan
from .net import NetworkConfig, NonFiniteError, ParameterSet, backward, forward, init_parameters
from .rng import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 20
    batch_size: int = 8192
    patience: int = 3
    min_delta: float = 1e-5
    early_stopping: bool = True
    seed: int = 0
    init_seed: Optional[int] = None
    march_only: bool = False
    concat_months: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.march_only and self.concat_months:
            raise ValueError("march_only and concat_months are exclusive")

    @property
    def month_policy(self) -> str:
        if self.concat_months:
            return "all"
        return "march" if self.march_only else "random"

    def resolved_init_seed(self) -> int:
        return derive_seed(self.seed, "init") if self.init_seed is None else self.init_seed


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params: ParameterSet) -> "OptimizerState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), 0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over all entries, reduced in float64; gradient in ``pred``'s dtype."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype if np.issubdtype(pred.dtype, np.floating) else np.float64)


def adam_step(params: ParameterSet, grads: ParameterSet, state: OptimizerState, cfg: TrainConfig):
    """In-place Adam update with bias correction. Returns ``(params, state)``."""
    g = grads if isinstance(grads, np.ndarray) else grads.flat
    if g.shape != params.flat.shape:
        raise ValueError("gradient shape does not match parameters")
    bad = ~np.isfinite(g)
    if bad.any():
        where = params.segment_of(int(np.flatnonzero(bad)[0])) if hasattr(params, "segment_of") else "parameters"
        raise NonFiniteError(where, "non-finite gradient")
    state.t += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * g
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * (g * g)
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    update = (cfg.learning_rate / bc1) * state.m / (np.sqrt(state.v / bc2) + cfg.eps)
    params.flat -= update.astype(params.flat.dtype, copy=False)
    return params, state


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a ``min_delta`` improvement."""

    def __init__(self, patience: int = 3, min_delta: float = 1e-5):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wallclock_s: float


def pretraining_config(net_cfg: NetworkConfig, grid: ClimGrid, train_cfg: TrainConfig) -> NetworkConfig:
    """Input/output widths implied by the grid and the month policy."""
    if train_cfg.concat_months:
        return replace(net_cfg, input_dim=2, output_dim=MONTHS * grid.n_vars)
    return replace(net_cfg, input_dim=4, output_dim=grid.n_vars)


def train_step(cfg: NetworkConfig, params: ParameterSet, state: OptimizerState, x, y, tcfg: TrainConfig) -> float:
    _, out, trace = forward(cfg, params, x, keep_trace=True)
    loss, grad = mse_loss(out, y)
    if not np.isfinite(loss):
        raise NonFiniteError("loss")
    adam_step(params, backward(cfg, params, trace, grad_output=grad), state, tcfg)
    return loss


def pretrain(
    grid: ClimGrid,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[Checkpoint, List[EpochRecord]]:
    """Fit the network to the normalized grid; returns the best-loss checkpoint and history."""
    if not grid.is_normalized:
        raise ValueError("grid must be normalized (fit_normalization)")
    cfg = pretraining_config(net_cfg, grid, train_cfg)
    params = init_parameters(cfg, train_cfg.resolved_init_seed())
    state = OptimizerState.like(params)
    stopper = EarlyStopping(train_cfg.patience, train_cfg.min_delta)
    history: List[EpochRecord] = []
    best_loss, best_params, best_epoch = np.inf, params.copy(), 0
    t0 = time.perf_counter()
    for epoch in range(1, train_cfg.max_epochs + 1):
        plan = EpochPlan(grid, train_cfg.batch_size, derive_seed(train_cfg.seed, f"epoch{epoch}"),
                         train_cfg.month_policy)
        total, count = 0.0, 0
        for batch in plan:
            loss = train_step(cfg, params, state, batch.encodings, batch.targets, train_cfg)
            total += loss * len(batch)
            count += len(batch)
        rec = EpochRecord(epoch, total / count, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.6f", epoch, rec.mean_loss)
        if on_epoch is not None:
            on_epoch(rec)
        if rec.mean_loss < best_loss:
            best_loss, best_params, best_epoch = rec.mean_loss, params.copy(), epoch
        if train_cfg.early_stopping and stopper.update(rec.mean_loss):
            break
    meta = {
        "steps": state.t,
        "epochs": len(history),
        "best_epoch": best_epoch,
        "final_loss": best_loss,
        "seed": train_cfg.seed,
        "init_seed": train_cfg.resolved_init_seed(),
        "train_config": asdict(train_cfg),
    }
    ckpt = Checkpoint(cfg, best_params, grid.mean, grid.std, meta)
    return ckpt, history


def evaluate_mse(ckpt_or_cfg, params: Optional[ParameterSet], grid: ClimGrid, month_policy: str = "random",
                 batch_size: int = 4096) -> float:
    """Normalized MSE over every land pixel and month (all 12, or March only)."""
    if isinstance(ckpt_or_cfg, Checkpoint):
        cfg, params = ckpt_or_cfg.config, ckpt_or_cfg.params
    else:
        cfg = ckpt_or_cfg
    lon, lat = grid.land_lonlat
    table = grid.land_values
    total, count = 0.0, 0
    if cfg.input_dim == 2:
        for s in range(0, lon.size, batch_size):
            sl = slice(s, s + batch_size)
            _, out, _ = forward(cfg, params, encode_batch(lon[sl], lat[sl], validate=False))
            d = out.astype(np.float64) - table[sl].reshape(out.shape[0], -1)
            total += float(np.sum(d * d))
            count += d.size
        return total / count
    months = [3] if month_policy == "march" else range(1, MONTHS + 1)
    for m in months:
        for s in range(0, lon.size, batch_size):
            sl = slice(s, s + batch_size)
            _, out, _ = forward(cfg, params, encode_batch(lon[sl], lat[sl], m, validate=False))
            d = out.astype(np.float64) - table[sl, m - 1]
            total += float(np.sum(d * d))
            count += d.size
    return total / count


def write_history_csv(path, history: List[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wallclock_s"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.mean_loss), f"{rec.wallclock_s:.3f}"])
