"""Synthetic downstream tasks built on a ClimGrid: biomes, species occurrences, traits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import MONTHS, ClimGrid, SmoothField
from .rng import SplitMix64, derive_seed

SPLITS = ("train", "val", "test")
BIOMES_SPLIT = (0.5, 0.1, 0.4)
SDM_SPLIT = (0.7, 0.05, 0.25)
TRAITS_SPLIT = (0.5, 0.1, 0.4)
TASK_KINDS = ("classification", "sdm", "regression")


@dataclass(eq=False)
class TaskDataset:
    """Point records with targets. ``month == 0`` marks a static (month-less) record."""

    kind: str
    lon: np.ndarray
    lat: np.ndarray
    month: np.ndarray
    split: np.ndarray
    targets: np.ndarray
    n_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}")
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.month = np.asarray(self.month, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        self.targets = np.asarray(self.targets)
        n = self.lon.size
        for name in ("lat", "month", "split"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if self.targets.shape[0] != n:
            raise ValueError("targets length mismatch")
        if not np.all(np.isin(self.split, SPLITS)):
            raise ValueError(f"split labels must be in {SPLITS}")

    def __len__(self) -> int:
        return self.lon.size

    @property
    def has_months(self) -> bool:
        return bool(np.all(self.month > 0))

    def mask(self, split: str) -> np.ndarray:
        return self.split == split

    def to_csv(self, path) -> None:
        targets = self.targets.reshape(len(self), -1)
        if self.kind == "regression":
            tcols = [f"target_{k}" for k in range(targets.shape[1])]
        else:
            tcols = ["target"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lon_deg", "lat_deg", "month", "split"] + tcols)
            for i in range(len(self)):
                vals = [repr(float(t)) for t in targets[i]] if self.kind == "regression" else [int(targets[i, 0])]
                w.writerow([repr(float(self.lon[i])), repr(float(self.lat[i])), int(self.month[i]), self.split[i]] + vals)

    @classmethod
    def from_csv(cls, path, kind: Optional[str] = None, n_classes: Optional[int] = None) -> "TaskDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:4] != ["lon_deg", "lat_deg", "month", "split"]:
            raise ValueError(f"unexpected header {header}")
        cols = list(zip(*body)) if body else [[] for _ in header]
        lon = np.array(cols[0], dtype=np.float64)
        lat = np.array(cols[1], dtype=np.float64)
        month = np.array(cols[2], dtype=np.int64)
        split = np.array(cols[3], dtype="<U5")
        tcols = header[4:]
        if kind is None:
            if len(tcols) > 1 or tcols[0].startswith("target_"):
                kind = "regression"
            else:
                kind = "sdm" if np.all(month > 0) else "classification"
        if kind == "regression":
            targets = np.stack([np.array(c, dtype=np.float64) for c in cols[4:]], axis=1)
            n_classes = 0
        else:
            targets = np.array(cols[4], dtype=np.int64)
            n_classes = int(targets.max()) + 1 if n_classes is None else n_classes
        return cls(kind, lon, lat, month, split, targets, n_classes)


def assign_splits(n: int, fractions: Sequence[float], seed: int) -> np.ndarray:
    """Shuffle ``n`` records into train/val/test with sizes ``round(cumsum(fractions) * n)``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("split must be three non-negative fractions summing to 1")
    bounds = np.round(np.cumsum(fr) * n).astype(np.int64)
    labels = np.empty(n, dtype="<U5")
    labels[: bounds[0]] = "train"
    labels[bounds[0]: bounds[1]] = "val"
    labels[bounds[1]:] = "test"
    perm = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    out = np.empty(n, dtype="<U5")
    out[perm] = labels
    return out


def sample_land_points(grid: ClimGrid, n_points: int, seed: int, replace: bool = False, jitter: bool = True):
    """Uniform land locations: returns ``(land_pos, lon, lat)``.

    ``land_pos`` indexes ``grid.land_index``. With ``jitter`` each point is spread
    uniformly inside its pixel.
    """
    n_land = grid.land_index.size
    if not replace and n_points > n_land:
        raise ValueError(f"n_points={n_points} exceeds the {n_land} land pixels")
    rng = np.random.default_rng(derive_seed(seed, "land-points"))
    pos = rng.choice(n_land, size=n_points, replace=replace)
    lon, lat = grid.land_lonlat
    lon, lat = lon[pos].copy(), lat[pos].copy()
    if jitter:
        dlon, dlat = grid.pixel_size
        lon += (rng.random(n_points) - 0.5) * dlon * 0.999
        lat += (rng.random(n_points) - 0.5) * dlat * 0.999
    return pos, lon, lat


def biome_field(seed: int) -> SmoothField:
    return SmoothField.from_stream(SplitMix64(derive_seed(seed, "biome-field")), 6, 0.5, 3.0)


def quantile_bins(values: np.ndarray, n_classes: int) -> np.ndarray:
    """Label by rank so every class holds ``n / n_classes`` records (up to rounding)."""
    ranks = np.argsort(np.argsort(values, kind="stable"), kind="stable")
    return (ranks * n_classes // values.size).astype(np.int64)


def build_biomes_task(grid: ClimGrid, n_points: int, n_classes: int = 5, split=BIOMES_SPLIT, seed: int = 0,
                      replace: bool = False) -> TaskDataset:
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    _, lon, lat = sample_land_points(grid, n_points, seed, replace=replace)
    labels = quantile_bins(biome_field(seed)(lon, lat), n_classes)
    return TaskDataset("classification", lon, lat, np.zeros(n_points, np.int64),
                       assign_splits(n_points, split, seed), labels, n_classes)


@dataclass
class SpeciesModel:
    """Per-species log-linear suitability over normalized variables with a month gate."""

    weights: np.ndarray  # (S, V)
    bias: np.ndarray  # (S,)
    gate: np.ndarray  # (S, 12) bool

    @property
    def n_species(self) -> int:
        return self.bias.size

    @classmethod
    def random(cls, n_vars: int, n_species: int, seed: int, sharpness: float = 2.0) -> "SpeciesModel":
        s = SplitMix64(derive_seed(seed, "species"))
        w = s.uniform(n_species * n_vars, -1.0, 1.0).reshape(n_species, n_vars)
        w *= sharpness / np.sqrt(n_vars)
        bias = s.uniform(n_species, -0.5, 0.5)
        start = s.integers(n_species, MONTHS)
        length = 4 + s.integers(n_species, MONTHS - 3)  # 4..12 months
        gate = np.zeros((n_species, MONTHS), dtype=bool)
        for k in range(n_species):
            gate[k, (start[k] + np.arange(length[k])) % MONTHS] = True
        return cls(w, bias, gate)

    def suitability(self, grid: ClimGrid) -> np.ndarray:
        """Relative occurrence intensity, shape ``(S, 12, n_land)``."""
        x = grid.land_values.astype(np.float64)  # (n_land, 12, V)
        score = np.einsum("lmv,sv->sml", x, self.weights) + self.bias[:, None, None]
        return np.exp(score) * self.gate[:, :, None]


def build_sdm_task(grid: ClimGrid, n_species: int, n_occurrences: int, split=SDM_SPLIT, seed: int = 0,
                   species: Optional[SpeciesModel] = None) -> TaskDataset:
    """Presence-only records: species uniform, then (pixel, month) proportional to suitability."""
    if species is None:
        if n_species < 2:
            raise ValueError("n_species must be >= 2")
        species = SpeciesModel.random(grid.n_vars, n_species, seed)
    elif species.n_species < 2:
        raise ValueError("n_species must be >= 2")
    S = species.n_species
    suit = species.suitability(grid).reshape(S, -1)
    probs = suit / suit.sum(axis=1, keepdims=True)
    rng = np.random.default_rng(derive_seed(seed, "occurrences"))
    sp = rng.integers(0, S, n_occurrences)
    cells = np.empty(n_occurrences, dtype=np.int64)
    for k in range(S):
        idx = np.flatnonzero(sp == k)
        if idx.size:
            cells[idx] = rng.choice(probs.shape[1], size=idx.size, p=probs[k])
    month_idx, pos = np.divmod(cells, grid.land_index.size)
    lon, lat = grid.land_lonlat
    dlon, dlat = grid.pixel_size
    lon = lon[pos] + (rng.random(n_occurrences) - 0.5) * dlon * 0.999
    lat = lat[pos] + (rng.random(n_occurrences) - 0.5) * dlat * 0.999
    ds = TaskDataset("sdm", lon, lat, month_idx + 1, assign_splits(n_occurrences, split, seed), sp, S)
    ds.meta["species"] = species
    return ds


@dataclass
class TraitRecipe:
    """Target = squash(mean_w . annual_mean + contrast_w . (JJA - DJF) + season_w . warm_months).

    ``warm_months`` is the fraction of months above 0.5 normalized units (soft step);
    ``squash`` is ``tanh(z / (2 std(z)))`` over the sampled points.
    """

    mean_w: np.ndarray
    contrast_w: np.ndarray
    season_w: np.ndarray
    squash: bool = True

    def __call__(self, values: np.ndarray) -> np.ndarray:
        """``values``: normalized ``(n, 12, V)``."""
        annual_mean = values.mean(axis=1)
        contrast = values[:, [5, 6, 7]].mean(axis=1) - values[:, [11, 0, 1]].mean(axis=1)
        warm = (1.0 / (1.0 + np.exp(-(values - 0.5) / 0.25))).sum(axis=1) / MONTHS
        z = annual_mean @ self.mean_w + contrast @ self.contrast_w + warm @ self.season_w
        if self.squash:
            z = np.tanh(z / max(2.0 * np.std(z), 1e-12))
        return z


def random_trait_recipes(n_vars: int, n_targets: int, seed: int) -> list:
    """Seasonal contrast carries most of the weight; annual means contribute less."""
    s = SplitMix64(derive_seed(seed, "traits"))
    recipes = []
    for _ in range(n_targets):
        mean_w = 0.25 * s.uniform(n_vars, -1.0, 1.0)
        contrast_w = s.uniform(n_vars, -1.0, 1.0)
        season_w = 0.5 * s.uniform(n_vars, -1.0, 1.0)
        recipes.append(TraitRecipe(mean_w, contrast_w, season_w))
    return recipes


def build_traits_task(grid: ClimGrid, n_points: int, n_targets: int = 8, split=TRAITS_SPLIT, seed: int = 0,
                      recipes: Optional[list] = None, replace: bool = False) -> TaskDataset:
    """Regression targets from yearly aggregates at each point's pixel, standardized on train."""
    if recipes is None:
        if n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        recipes = random_trait_recipes(grid.n_vars, n_targets, seed)
    pos, lon, lat = sample_land_points(grid, n_points, seed, replace=replace)
    values = grid.land_values[pos].astype(np.float64)
    targets = np.stack([r(values) for r in recipes], axis=1)
    splits = assign_splits(n_points, split, seed)
    train = splits == "train"
    mu = targets[train].mean(axis=0)
    sd = targets[train].std(axis=0)
    targets = (targets - mu) / np.where(sd > 0, sd, 1.0)
    return TaskDataset("regression", lon, lat, np.zeros(n_points, np.int64), splits, targets)
