"""Probing frozen embeddings, plus the from-scratch baselines.

A probe is a small head (one affine layer, or a 3x64 tanh MLP) trained with Adam on
top of one or more feature branches. Frozen branches only standardize precomputed
features; trainable branches (a location ReSIREN, a residual MLP over seasonal grid
values) are optimized jointly with the head and realize the from-scratch baselines.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import MONTHS, ClimGrid
from .encoding import SEASONAL_MONTHS, GeoTemporalPoint, encode_batch
from .metrics import macro_f1, r2, top1
from .net import NetworkConfig, ParameterSet, backward, forward, init_parameters
from .rng import derive_seed
from .tasks import TaskDataset, sample_land_points
from .train import OptimizerState, TrainConfig, adam_step

POLICIES = ("obs", "seasonal", "rec")
N_INITS = 10
THREADS_ENV = "RESIREN_THREADS"
METRIC_OF_TASK = {"classification": "macro_f1", "sdm": "top1", "regression": "r2"}


def job_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def map_jobs(fn: Callable, items: Sequence) -> list:
    """Ordered map over a bounded thread pool sized by ``RESIREN_THREADS``."""
    n = job_threads()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- embedding providers ---------------------------------------------------


@dataclass
class EmbeddingProvider:
    """Frozen checkpoint plus the month policy used to turn points into features.

    ``obs``: embedding at each record's month. ``seasonal``: embeddings at months 3,
    6, 9 and 12, concatenated. ``rec``: head outputs (reconstructed variables) at the
    record's month, or their annual mean for month-less records.
    """

    checkpoint: Checkpoint
    policy: str = "seasonal"
    epoch: Optional[float] = None
    name: str = ""
    batch_size: int = 4096

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if not self.name:
            self.name = self.policy

    @property
    def width(self) -> int:
        cfg = self.checkpoint.config
        return {"obs": cfg.embedding_dim, "seasonal": 4 * cfg.embedding_dim, "rec": cfg.output_dim}[self.policy]

    def _run(self, lon, lat, month, head: bool) -> np.ndarray:
        cfg, params = self.checkpoint.config, self.checkpoint.params
        outs = []
        for s in range(0, lon.size, self.batch_size):
            sl = slice(s, s + self.batch_size)
            if cfg.input_dim == 2:
                x = encode_batch(lon[sl], lat[sl])
            else:
                m = month if np.isscalar(month) else month[sl]
                ep = None
                if cfg.input_dim == 5:
                    ep = -1.0 if self.epoch is None else self.epoch
                x = encode_batch(lon[sl], lat[sl], m, epoch=ep)
            emb, out, _ = forward(cfg, params, x, with_head=head)
            outs.append(out if head else emb)
        return np.concatenate(outs, axis=0).astype(np.float64)


def embed(provider: EmbeddingProvider, lon, lat, month=None) -> np.ndarray:
    """Feature matrix for the given coordinates under the provider's month policy."""
    lon = np.asarray(lon, dtype=np.float64).reshape(-1)
    lat = np.asarray(lat, dtype=np.float64).reshape(-1)
    has_month = month is not None and np.all(np.asarray(month) > 0)
    if month is not None:
        month = np.broadcast_to(np.asarray(month, dtype=np.int64), lon.shape)
    if provider.policy == "obs":
        if not has_month:
            raise ValueError("the 'obs' month policy needs an observation month for every record")
        return provider._run(lon, lat, month, head=False)
    if provider.policy == "seasonal":
        return np.concatenate([provider._run(lon, lat, m, head=False) for m in SEASONAL_MONTHS], axis=1)
    if has_month:
        return provider._run(lon, lat, month, head=True)
    return np.mean([provider._run(lon, lat, m, head=True) for m in range(1, MONTHS + 1)], axis=0)


def embed_points(provider: EmbeddingProvider, points: Sequence[GeoTemporalPoint]) -> np.ndarray:
    lon = np.array([p.lon_deg for p in points])
    lat = np.array([p.lat_deg for p in points])
    month = np.array([p.month for p in points])
    return embed(provider, lon, lat, month)


def embed_dataset(provider: EmbeddingProvider, ds: TaskDataset) -> np.ndarray:
    return embed(provider, ds.lon, ds.lat, ds.month if ds.has_months else None)


def background_bank(provider: EmbeddingProvider, grid: ClimGrid, n_bank: int, seed: int) -> np.ndarray:
    """Features of uniform land points, shape ``(12, n_bank, F)`` (``(1, n_bank, F)`` if month-free)."""
    _, lon, lat = sample_land_points(grid, n_bank, derive_seed(seed, "background"), replace=True)
    if provider.policy == "seasonal":
        return embed(provider, lon, lat)[None]
    return np.stack([embed(provider, lon, lat, m) for m in range(1, MONTHS + 1)])


# -- losses ----------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax_xent(scores: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient in ``scores``."""
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = scores.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def anfull_loss(scores: np.ndarray, species: np.ndarray, background_scores: np.ndarray,
                pos_weight: Optional[float] = None):
    """Presence-only "assume negative, full" loss with one background point per record.

    Per record ``i`` with observed species ``s`` and ``S`` species::

        -[w log sig(p_is) + sum_{s' != s} log(1 - sig(p_is')) + sum_s' log(1 - sig(q_is'))] / S

    averaged over the batch, with ``w = S`` unless ``pos_weight`` is given.
    Returns ``(loss, d loss/d scores, d loss/d background_scores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    bg = np.asarray(background_scores, dtype=np.float64)
    species = np.asarray(species, dtype=np.int64)
    B, S = scores.shape
    if np.any(species < 0) or np.any(species >= S):
        raise ValueError("species id out of range")
    w = float(S) if pos_weight is None else float(pos_weight)
    rows = np.arange(B)
    pos = np.zeros_like(scores, dtype=bool)
    pos[rows, species] = True
    # -log sig(x) = softplus(-x); -log(1 - sig(x)) = softplus(x)
    per = np.where(pos, w * _softplus(-scores), _softplus(scores)).sum(axis=1) + _softplus(bg).sum(axis=1)
    loss = float(np.mean(per) / S)
    sig = _sigmoid(scores)
    g = np.where(pos, -w * (1.0 - sig), sig) / (S * B)
    g_bg = _sigmoid(bg) / (S * B)
    return loss, g, g_bg


# -- trainable pieces ------------------------------------------------------


@dataclass
class FlatParams:
    flat: np.ndarray


class Dense:
    """Affine layers with tanh between them; ``sizes = [in, h1, ..., out]``."""

    def __init__(self, sizes: Sequence[int], seed: int):
        self.sizes = list(sizes)
        n = sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        self.params = FlatParams(np.zeros(n))
        rng = np.random.default_rng(derive_seed(seed, "dense-init"))
        self.layers = []
        pos = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.params.flat[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = self.params.flat[pos:pos + o]
            pos += o
            bound = 1.0 / math.sqrt(i)
            W[...] = rng.uniform(-bound, bound, (i, o))
            b[...] = rng.uniform(-bound, bound, o)
            self.layers.append((W, b))

    def forward(self, x):
        acts = [x]
        for k, (W, b) in enumerate(self.layers):
            x = x @ W + b
            if k < len(self.layers) - 1:
                x = np.tanh(x)
            acts.append(x)
        return x, acts

    def backward(self, acts, dout):
        grad = np.zeros_like(self.params.flat)
        pos_end = grad.size
        d = dout
        views = []
        pos = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            views.append((grad[pos:pos + i * o].reshape(i, o), grad[pos + i * o:pos + i * o + o]))
            pos += i * o + o
        assert pos == pos_end
        for k in range(len(self.layers) - 1, -1, -1):
            if k < len(self.layers) - 1:
                d = d * (1.0 - acts[k + 1] ** 2)
            gW, gb = views[k]
            gW += acts[k].T @ d
            gb += d.sum(axis=0)
            d = d @ self.layers[k][0].T
        return grad, d


class FrozenBranch:
    """Precomputed features, standardized with training-split statistics."""

    lr = 0.0

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = mean
        self.std = np.where(std > 0, std, 1.0)
        self.params = None
        self.width = mean.size

    def forward(self, x):
        return (x - self.mean) / self.std, None


class SirenBranch:
    """Location-only ReSIREN trained from scratch (input ``[lon/180, lat/90]``)."""

    def __init__(self, cfg: NetworkConfig, seed: int, lr: float = 1e-4):
        self.cfg = replace(cfg, input_dim=2)
        self.params = init_parameters(self.cfg, seed, dtype=np.float64)
        self.lr = lr
        self.width = self.cfg.embedding_dim

    def forward(self, x):
        emb, _, trace = forward(self.cfg, self.params, x, keep_trace=True, with_head=False)
        return emb, trace

    def backward(self, trace, d):
        return backward(self.cfg, self.params, trace, grad_embedding=d).flat


class ResMLPBranch:
    """ReLU input layer followed by ``n_layers`` residual layers ``y + relu(y W + b)``."""

    def __init__(self, in_dim: int, hidden: int, seed: int, n_layers: int = 4, lr: float = 1e-3):
        self.net = Dense([in_dim] + [hidden] * (n_layers + 1), seed)
        self.params = self.net.params
        self.lr = lr
        self.width = hidden

    def forward(self, x):
        acts = [x]
        for k, (W, b) in enumerate(self.net.layers):
            pre = np.maximum(x @ W + b, 0.0)
            x = pre if k == 0 else x + pre
            acts.append(pre)
        return x, acts

    def backward(self, acts, d):
        grad = np.zeros_like(self.params.flat)
        views, pos = [], 0
        for W, _ in self.net.layers:
            i, o = W.shape
            views.append((grad[pos:pos + i * o].reshape(i, o), grad[pos + i * o:pos + i * o + o]))
            pos += i * o + o
        xs = [acts[0]]
        for k in range(len(self.net.layers)):
            xs.append(acts[k + 1] if k == 0 else xs[-1] + acts[k + 1])
        for k in range(len(self.net.layers) - 1, -1, -1):
            W = self.net.layers[k][0]
            dpre = d * (acts[k + 1] > 0)
            gW, gb = views[k]
            gW += xs[k].T @ dpre
            gb += dpre.sum(axis=0)
            dx = dpre @ W.T
            d = dx if k == 0 else d + dx
        return grad


# -- probe fitting ---------------------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    kind: str = "linear"  # "linear" | "mlp"
    task: str = "classification"  # "classification" | "sdm" | "regression"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    n_inits: int = N_INITS
    hidden: tuple = (64, 64, 64)
    n_background: int = 2048

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError("probe kind must be 'linear' or 'mlp'")
        if self.task not in METRIC_OF_TASK:
            raise ValueError(f"task must be one of {tuple(METRIC_OF_TASK)}")
        if self.n_inits < 1:
            raise ValueError("n_inits must be >= 1")

    @property
    def metric(self) -> str:
        return METRIC_OF_TASK[self.task]


@dataclass
class ProbeModel:
    branches: list
    head: Dense
    task: str
    best_epoch: int = 0
    history: list = field(default_factory=list)

    def scores(self, inputs: Sequence[np.ndarray], batch_size: int = 4096) -> np.ndarray:
        n = inputs[0].shape[0]
        out = []
        for s in range(0, n, batch_size):
            feats = [br.forward(x[s:s + batch_size])[0] for br, x in zip(self.branches, inputs)]
            out.append(self.head.forward(np.concatenate(feats, axis=1))[0])
        return np.concatenate(out, axis=0)

    def predict(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        """Class ids for classification, per-species probabilities for sdm, values for regression."""
        s = self.scores(inputs)
        if self.task == "classification":
            return np.argmax(s, axis=1)
        if self.task == "sdm":
            return _sigmoid(s)
        return s


def task_metric(task: str, scores: np.ndarray, targets: np.ndarray, n_classes: int = 0) -> float:
    if task == "classification":
        return macro_f1(np.argmax(scores, axis=1), targets, n_classes)
    if task == "sdm":
        return top1(scores, targets)
    return r2(scores, targets)


BackgroundSampler = Callable[[np.random.Generator, np.ndarray], List[np.ndarray]]


def fit_model(branches: list, train_inputs, y_train, val_inputs, y_val, spec: ProbeSpec, seed: int,
              n_out: int, n_classes: int = 0, background: Optional[BackgroundSampler] = None,
              train_months: Optional[np.ndarray] = None) -> ProbeModel:
    """Train head (and any trainable branches) with Adam; keep the best-validation epoch."""
    if spec.task == "classification" and np.unique(y_train).size < 2:
        raise ValueError("classification targets need at least two classes")
    if spec.task == "sdm" and background is None:
        raise ValueError("sdm probes need a background sampler")
    width = sum(br.width for br in branches)
    hidden = list(spec.hidden) if spec.kind == "mlp" else []
    head = Dense([width] + hidden + [n_out], derive_seed(seed, "head"))
    groups = [(head.params, spec.learning_rate)]
    groups += [(br.params, br.lr) for br in branches if br.params is not None]
    states = [OptimizerState.like(p) for p, _ in groups]
    model = ProbeModel(branches, head, spec.task)
    rng = np.random.default_rng(derive_seed(seed, "probe-batches"))
    n = y_train.shape[0]
    best = (-np.inf, None)
    for epoch in range(1, spec.epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n, spec.batch_size):
            idx = perm[s:s + spec.batch_size]
            grads = _batch_grads(model, [x[idx] for x in train_inputs], y_train[idx], spec, rng, background,
                                 None if train_months is None else train_months[idx])
            for (p, lr), st, g in zip(groups, states, grads):
                adam_step(p, g, st, TrainConfig(learning_rate=lr))
        score = task_metric(spec.task, model.scores(val_inputs), y_val, n_classes)
        model.history.append(score)
        if score > best[0]:
            best = (score, [p.flat.copy() for p, _ in groups])
            model.best_epoch = epoch
    for (p, _), saved in zip(groups, best[1]):
        p.flat[...] = saved
    return model


def _batch_grads(model: ProbeModel, inputs, y, spec: ProbeSpec, rng, background, months):
    feats, caches = zip(*[br.forward(x) for br, x in zip(model.branches, inputs)])
    f = np.concatenate(feats, axis=1)
    out, acts = model.head.forward(f)
    passes = [(acts, caches)]
    if spec.task == "classification":
        _, dout = softmax_xent(out, y)
        douts = [dout]
    elif spec.task == "regression":
        diff = out - y
        douts = [2.0 * diff / diff.size]
    else:
        bg_inputs = background(rng, months)
        bfeats, bcaches = zip(*[br.forward(x) for br, x in zip(model.branches, bg_inputs)])
        bout, bacts = model.head.forward(np.concatenate(bfeats, axis=1))
        _, dout, dbg = anfull_loss(out, y, bout)
        douts = [dout, dbg]
        passes.append((bacts, bcaches))
    head_grad = np.zeros_like(model.head.params.flat)
    branch_grads = [np.zeros_like(br.params.flat) for br in model.branches if br.params is not None]
    for (acts_k, caches_k), d in zip(passes, douts):
        g, dfeat = model.head.backward(acts_k, d)
        head_grad += g
        col, j = 0, 0
        for br, cache in zip(model.branches, caches_k):
            if br.params is not None:
                branch_grads[j] += br.backward(cache, dfeat[:, col:col + br.width])
                j += 1
            col += br.width
    return [head_grad] + branch_grads


def fit_probe(features: np.ndarray, targets: np.ndarray, split: np.ndarray, spec: ProbeSpec, seed: int,
              n_classes: int = 0, bank: Optional[np.ndarray] = None, months: Optional[np.ndarray] = None) -> ProbeModel:
    """Probe on frozen ``features`` using the train split to fit and val to select the epoch."""
    train, val = split == "train", split == "val"
    mean = features[train].mean(axis=0)
    std = features[train].std(axis=0)
    branch = FrozenBranch(mean, std)
    n_out, y_tr, y_va = _targets(spec.task, targets, train, val, n_classes)
    sampler = None
    if spec.task == "sdm":
        if bank is None or months is None:
            raise ValueError("sdm probes need a background bank and record months")
        sampler = _bank_sampler(bank)
    return fit_model([branch], [features[train]], y_tr, [features[val]], y_va, spec, seed, n_out, n_classes,
                     sampler, None if months is None else months[train])


def _targets(task, targets, train, val, n_classes):
    if task == "regression":
        t = np.asarray(targets, dtype=np.float64).reshape(targets.shape[0], -1)
        return t.shape[1], t[train], t[val]
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    return n_classes, targets[train], targets[val]


def _bank_sampler(bank: np.ndarray) -> BackgroundSampler:
    def sample(rng, months):
        idx = rng.integers(0, bank.shape[1], months.size)
        mi = months - 1 if bank.shape[0] == MONTHS else np.zeros_like(months)
        return [bank[mi, idx]]
    return sample


# -- reports ---------------------------------------------------------------


@dataclass
class ProbeReport:
    metric: str
    mean: float
    std: float
    values: List[float]
    seeds: List[int]
    task: str
    provider: str
    probe_kind: str

    @classmethod
    def from_values(cls, values, seeds, metric, task, provider, probe_kind) -> "ProbeReport":
        v = np.asarray(values, dtype=np.float64)
        return cls(metric, float(v.mean()), float(v.std()), [float(x) for x in v], list(seeds), task, provider,
                   probe_kind)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ProbeReport":
        with open(path) as fh:
            return cls(**json.load(fh))

    def csv_row(self) -> list:
        return [self.provider, self.task, self.probe_kind, self.metric, repr(self.mean), repr(self.std)] + [
            repr(v) for v in self.values]


def write_reports_csv(path, reports: Sequence[ProbeReport]) -> None:
    width = max(len(r.values) for r in reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["provider", "task", "probe_kind", "metric", "mean", "std"] + [f"seed_{k}" for k in range(width)])
        for r in reports:
            w.writerow(r.csv_row())


def run_feature_suite(features: np.ndarray, ds: TaskDataset, spec: ProbeSpec, provider_name: str,
                      bank: Optional[np.ndarray] = None) -> ProbeReport:
    """Ten (``spec.n_inits``) probes with seeds ``0..n_inits-1``; test metric mean and std."""
    test = ds.mask("test")
    months = ds.month if ds.has_months else None

    def one(seed):
        model = fit_probe(features, ds.targets, ds.split, spec, seed, ds.n_classes, bank, months)
        return task_metric(spec.task, model.scores([features[test]]), _test_targets(ds, test), ds.n_classes)

    seeds = list(range(spec.n_inits))
    return ProbeReport.from_values(map_jobs(one, seeds), seeds, spec.metric, spec.task, provider_name, spec.kind)


def _test_targets(ds, test):
    t = ds.targets[test]
    return t.reshape(t.shape[0], -1) if ds.kind == "regression" else t


def run_probe_suite(provider: EmbeddingProvider, ds: TaskDataset, spec: ProbeSpec,
                    grid: Optional[ClimGrid] = None, seed: int = 0) -> ProbeReport:
    if spec.task != ds.kind:
        raise ValueError(f"probe task {spec.task!r} does not match dataset kind {ds.kind!r}")
    features = embed_dataset(provider, ds)
    bank = None
    if spec.task == "sdm":
        if grid is None:
            raise ValueError("sdm probing needs the grid to draw background locations")
        bank = background_bank(provider, grid, spec.n_background, seed)
    return run_feature_suite(features, ds, spec, provider.name, bank)


# -- from-scratch baselines ------------------------------------------------

BASELINES = ("fs-loc", "fs-ch", "fs-loc-ch")


def seasonal_grid_features(grid: ClimGrid, lon, lat) -> np.ndarray:
    """Normalized grid values at months 3, 6, 9, 12, flattened to ``(n, 4 V)``."""
    vals = grid.lookup(lon, lat)  # (n, 12, V)
    return vals[:, [m - 1 for m in SEASONAL_MONTHS]].reshape(vals.shape[0], -1)


def run_baseline_suite(kind: str, grid: ClimGrid, ds: TaskDataset, spec: ProbeSpec,
                       loc_cfg: Optional[NetworkConfig] = None, ch_hidden: int = 64, seed: int = 0) -> ProbeReport:
    """Train encoder + probe end to end on the task, ``spec.n_inits`` times."""
    if kind not in BASELINES:
        raise ValueError(f"baseline must be one of {BASELINES}")
    if loc_cfg is None:
        loc_cfg = NetworkConfig(depth=8, hidden_dim=64, embedding_dim=64, output_dim=1)
    use_loc = kind in ("fs-loc", "fs-loc-ch")
    use_ch = kind in ("fs-ch", "fs-loc-ch")
    inputs = []
    if use_loc:
        inputs.append(encode_batch(ds.lon, ds.lat))
    if use_ch:
        inputs.append(seasonal_grid_features(grid, ds.lon, ds.lat))
    bg_inputs = None
    if spec.task == "sdm":
        _, blon, blat = sample_land_points(grid, spec.n_background, derive_seed(seed, "background"), replace=True)
        bg_inputs = []
        if use_loc:
            bg_inputs.append(encode_batch(blon, blat))
        if use_ch:
            bg_inputs.append(seasonal_grid_features(grid, blon, blat))
    train, val, test = ds.mask("train"), ds.mask("val"), ds.mask("test")
    n_out, y_tr, y_va = _targets(spec.task, ds.targets, train, val, ds.n_classes)

    def one(s):
        branches = []
        if use_loc:
            branches.append(SirenBranch(loc_cfg, derive_seed(s, "fs-loc")))
        if use_ch:
            branches.append(ResMLPBranch(inputs[-1].shape[1], ch_hidden, derive_seed(s, "fs-ch")))
        sampler = None
        if bg_inputs is not None:
            def sampler(rng, months):
                idx = rng.integers(0, bg_inputs[0].shape[0], months.size)
                return [b[idx] for b in bg_inputs]
        model = fit_model(branches, [x[train] for x in inputs], y_tr, [x[val] for x in inputs], y_va, spec, s,
                          n_out, ds.n_classes, sampler, ds.month[train])
        return task_metric(spec.task, model.scores([x[test] for x in inputs]), _test_targets(ds, test),
                           ds.n_classes)

    seeds = list(range(spec.n_inits))
    return ProbeReport.from_values(map_jobs(one, seeds), seeds, spec.metric, spec.task, kind, spec.kind)
