"""Gridded monthly climatology: container, synthetic generator, normalization, sampling.

The synthetic field for variable ``v``, month ``m`` at ``(lon, lat)`` (radians
``x``, ``y`` below) is::

    a_v cos(pi * lat / 90)                                     latitudinal
  + A_v(lon, |lat|) cos(2 pi (m - phase_v) / 12) sign(lat)     seasonal
  + sum_k c_vk sin(alpha_k x + beta_k y + gamma_k)             texture, k = 1..8
  + e_v M(lon, lat) R(lon, lat)                                ridged elevation

with seasonal amplitude ``A_v = b_v (1 + kappa_v C_v(lon, lat))``, ``C_v`` a per-variable
even-in-lat continentality pattern (tanh of six plane-wave products), ``phase_v``
near a solstice, ``M`` a smooth mountain-belt mask and ``R`` ridged noise
shared by every variable. Coefficients come from a SplitMix64 stream in a fixed
draw order (see ``SyntheticClimate.from_seed``); trig is evaluated in float64 and
stored as float32.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Optional, Tuple

import numpy as np

from ._binary import FormatError, Reader, seal, unseal
from .encoding import encode_batch
from .rng import SplitMix64, derive_seed

MONTHS = 12
GRID_MAGIC = b"CGRD"
GRID_VERSION = 1
GLOBAL_EXTENT = (-180.0, 180.0, -90.0, 90.0)
N_TEXTURE = 8
N_RIDGE = 3
N_CONT = 6


@dataclass(eq=False)
class ClimGrid:
    """Monthly raster ``values[month - 1, variable, row, col]``; row 0 is the northern edge."""

    values: np.ndarray
    land_mask: np.ndarray
    extent: Tuple[float, float, float, float] = GLOBAL_EXTENT
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.land_mask = np.ascontiguousarray(self.land_mask, dtype=bool)
        self.extent = tuple(float(e) for e in self.extent)
        if self.values.ndim != 4 or self.values.shape[0] != MONTHS:
            raise ValueError(f"values must be (12, V, H, W), got {self.values.shape}")
        if self.land_mask.shape != self.values.shape[2:]:
            raise ValueError("land_mask shape does not match the raster")
        lon0, lon1, lat0, lat1 = self.extent
        if not (lon1 > lon0 and lat1 > lat0):
            raise ValueError("degenerate extent")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)
            self.std = np.asarray(self.std, dtype=np.float64)
            if np.any(~(self.std > 0)):
                raise ValueError("normalization std must be > 0")

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def is_normalized(self) -> bool:
        return self.mean is not None

    @property
    def pixel_size(self) -> Tuple[float, float]:
        lon0, lon1, lat0, lat1 = self.extent
        return (lon1 - lon0) / self.width, (lat1 - lat0) / self.height

    def pixel_to_lonlat(self, row, col):
        """Pixel-center coordinates in degrees."""
        dlon, dlat = self.pixel_size
        lon = self.extent[0] + (np.asarray(col) + 0.5) * dlon
        lat = self.extent[3] - (np.asarray(row) + 0.5) * dlat
        return lon, lat

    def lonlat_to_pixel(self, lon, lat):
        """Inverse of ``pixel_to_lonlat``; points on the far edges map to the last pixel."""
        dlon, dlat = self.pixel_size
        col = np.floor((np.asarray(lon, dtype=np.float64) - self.extent[0]) / dlon).astype(np.int64)
        row = np.floor((self.extent[3] - np.asarray(lat, dtype=np.float64)) / dlat).astype(np.int64)
        return np.clip(row, 0, self.height - 1), np.clip(col, 0, self.width - 1)

    @cached_property
    def land_index(self) -> np.ndarray:
        """Flat ``row * W + col`` indices of land pixels, row-major."""
        return np.flatnonzero(self.land_mask.reshape(-1))

    @cached_property
    def land_lonlat(self) -> Tuple[np.ndarray, np.ndarray]:
        rows, cols = np.divmod(self.land_index, self.width)
        return self.pixel_to_lonlat(rows, cols)

    @cached_property
    def land_values(self) -> np.ndarray:
        """Normalized land values, shape ``(n_land, 12, V)``, float32."""
        if not self.is_normalized:
            raise ValueError("fit_normalization must run first")
        flat = self.values.reshape(MONTHS, self.n_vars, -1)[:, :, self.land_index]
        norm = (flat.astype(np.float64) - self.mean[None, :, None]) / self.std[None, :, None]
        return np.ascontiguousarray(norm.transpose(2, 0, 1), dtype=np.float32)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """Normalize values whose last axis is the variable axis."""
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, norm: np.ndarray) -> np.ndarray:
        return np.asarray(norm, dtype=np.float64) * self.std + self.mean

    def lookup(self, lon, lat, month=None, normalized: bool = True) -> np.ndarray:
        """Values at the pixels containing ``(lon, lat)``.

        With ``month`` the result is ``(n, V)``; without it ``(n, 12, V)``.
        """
        rows, cols = self.lonlat_to_pixel(np.atleast_1d(lon), np.atleast_1d(lat))
        vals = self.values[:, :, rows, cols].astype(np.float64).transpose(2, 0, 1)  # (n, 12, V)
        if normalized:
            vals = self.normalize(vals)
        if month is None:
            return vals
        mon = np.broadcast_to(np.asarray(month), rows.shape)
        return vals[np.arange(rows.size), mon - 1]

    # -- file IO ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        mean = self.mean if self.is_normalized else np.full(self.n_vars, np.nan)
        std = self.std if self.is_normalized else np.full(self.n_vars, np.nan)
        parts = [
            struct.pack("<4I", self.width, self.height, self.n_vars, MONTHS),
            struct.pack("<4d", *self.extent),
            mean.astype("<f8").tobytes(),
            std.astype("<f8").tobytes(),
            self.values.astype("<f4").tobytes(),
            np.packbits(self.land_mask.reshape(-1), bitorder="little").tobytes(),
        ]
        return seal(GRID_MAGIC, GRID_VERSION, b"".join(parts))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClimGrid":
        rd = Reader(unseal(data, GRID_MAGIC, GRID_VERSION))
        w, h, v, m = rd.unpack("<4I")
        if m != MONTHS:
            raise FormatError(f"expected 12 months, got {m}")
        extent = rd.unpack("<4d")
        mean = np.frombuffer(rd.take(8 * v), dtype="<f8").astype(np.float64)
        std = np.frombuffer(rd.take(8 * v), dtype="<f8").astype(np.float64)
        values = np.frombuffer(rd.take(4 * m * v * h * w), dtype="<f4").reshape(m, v, h, w)
        n_mask = (h * w + 7) // 8
        bits = np.frombuffer(rd.take(n_mask), dtype=np.uint8)
        mask = np.unpackbits(bits, bitorder="little")[: h * w].reshape(h, w).astype(bool)
        rd.done()
        fitted = not np.all(np.isnan(mean))
        return cls(values.copy(), mask, extent, mean if fitted else None, std if fitted else None)


def save_grid(path, grid: ClimGrid) -> int:
    data = grid.to_bytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def load_grid(path) -> ClimGrid:
    with open(path, "rb") as fh:
        return ClimGrid.from_bytes(fh.read())


# -- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SmoothField:
    """Sum of low-frequency plane waves in radian coordinates."""

    amp: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    phase: np.ndarray

    @classmethod
    def from_stream(cls, stream: SplitMix64, n: int, fmin: float, fmax: float) -> "SmoothField":
        amp = stream.uniform(n, -1.0, 1.0)
        fx = stream.uniform(n, fmin, fmax)
        fy = stream.uniform(n, fmin, fmax)
        phase = stream.uniform(n, 0.0, 2.0 * np.pi)
        return cls(amp, fx, fy, phase)

    def __call__(self, lon, lat) -> np.ndarray:
        x = np.radians(np.asarray(lon, dtype=np.float64))[..., None]
        y = np.radians(np.asarray(lat, dtype=np.float64))[..., None]
        return np.sum(self.amp * np.sin(self.fx * x + self.fy * y + self.phase), axis=-1)


@dataclass(frozen=True)
class SyntheticClimate:
    lat_amp: np.ndarray  # a_v
    seas_amp: np.ndarray  # b_v
    seas_phase: np.ndarray  # phase_v, in months
    continentality: np.ndarray  # kappa_v
    cont_amp: np.ndarray
    cont_fx: np.ndarray
    cont_fy: np.ndarray
    cont_phase: np.ndarray
    tex_amp: np.ndarray  # c_vk, (V, 8)
    tex_alpha: np.ndarray
    tex_beta: np.ndarray
    tex_gamma: np.ndarray
    elev_amp: np.ndarray  # e_v
    ridge_freq: np.ndarray
    ridge_angle: np.ndarray
    ridge_phase: np.ndarray
    mountain: SmoothField
    land: SmoothField

    @property
    def n_vars(self) -> int:
        return self.lat_amp.size

    @classmethod
    def from_seed(cls, n_vars: int, seed: int) -> "SyntheticClimate":
        s = SplitMix64(derive_seed(seed, "climate"))
        lat_amp = s.uniform(n_vars, 0.5, 2.0) * np.where(s.uniform(n_vars) < 0.5, -1.0, 1.0)
        seas_amp = s.uniform(n_vars, 0.5, 1.5)
        # peaks near a solstice: mid-June..mid-July, or six months later
        seas_phase = s.uniform(n_vars, 6.0, 7.0) + 6.0 * (s.uniform(n_vars) < 0.5)
        continentality = s.uniform(n_vars, 1.0, 2.0) * np.where(s.uniform(n_vars) < 0.5, -1.0, 1.0)
        cont_amp = s.uniform(n_vars * N_CONT, -1.0, 1.0).reshape(n_vars, N_CONT)
        cont_fx = s.uniform(n_vars * N_CONT, 1.0, 6.0).reshape(n_vars, N_CONT)
        cont_fy = s.uniform(n_vars * N_CONT, 1.0, 6.0).reshape(n_vars, N_CONT)
        cont_phase = s.uniform(n_vars * N_CONT, 0.0, 2.0 * np.pi).reshape(n_vars, N_CONT)
        tex_amp = s.uniform(n_vars * N_TEXTURE, -0.5, 0.5).reshape(n_vars, N_TEXTURE)
        tex_alpha = s.uniform(N_TEXTURE, 1.0, 6.0)
        tex_beta = s.uniform(N_TEXTURE, 1.0, 6.0)
        tex_gamma = s.uniform(N_TEXTURE, 0.0, 2.0 * np.pi)
        elev_amp = s.uniform(n_vars, -1.5, 1.5)
        ridge_freq = 6.0 * 2.0 ** np.arange(N_RIDGE) * s.uniform(N_RIDGE, 0.8, 1.2)
        ridge_angle = s.uniform(N_RIDGE, 0.0, np.pi)
        ridge_phase = s.uniform(N_RIDGE, 0.0, 2.0 * np.pi)
        mountain = SmoothField.from_stream(s, 3, 0.5, 2.0)
        land = SmoothField.from_stream(s, 4, 0.5, 2.5)
        return cls(lat_amp, seas_amp, seas_phase, continentality, cont_amp, cont_fx, cont_fy, cont_phase,
                   tex_amp, tex_alpha, tex_beta, tex_gamma, elev_amp,
                   ridge_freq, ridge_angle, ridge_phase, mountain, land)

    def pure_seasonal(self) -> "SyntheticClimate":
        """Copy with the latitudinal, texture and elevation terms switched off."""
        return replace(self, lat_amp=np.zeros_like(self.lat_amp), tex_amp=np.zeros_like(self.tex_amp),
                       elev_amp=np.zeros_like(self.elev_amp))

    def continentality_field(self, lon, lat) -> np.ndarray:
        """Per-variable seasonal-amplitude modulation in (-1, 1), even in latitude; ``(..., V)``."""
        x = np.radians(np.asarray(lon, dtype=np.float64))[..., None, None]
        y = np.radians(np.asarray(lat, dtype=np.float64))[..., None, None]
        waves = self.cont_amp * np.sin(self.cont_fx * x + self.cont_phase) * np.cos(self.cont_fy * y)
        return np.tanh(np.sum(waves, axis=-1))

    def elevation(self, lon, lat) -> np.ndarray:
        """Ridged noise under a smooth mountain-belt mask, in [0, ~2.3]."""
        x = np.radians(np.asarray(lon, dtype=np.float64))[..., None]
        y = np.radians(np.asarray(lat, dtype=np.float64))[..., None]
        arg = self.ridge_freq * (x * np.cos(self.ridge_angle) + y * np.sin(self.ridge_angle)) + self.ridge_phase
        ridges = np.sum(0.5 ** np.arange(N_RIDGE) * (1.0 - np.abs(np.sin(arg))) ** 2, axis=-1)
        belt = np.clip(self.mountain(lon, lat), 0.0, None) ** 2
        return belt * ridges

    def evaluate(self, month, lon, lat) -> np.ndarray:
        """Raw values of every variable, shape ``broadcast(month, lon, lat) + (V,)``."""
        month, lon, lat = np.broadcast_arrays(np.asarray(month, dtype=np.float64),
                                              np.asarray(lon, dtype=np.float64),
                                              np.asarray(lat, dtype=np.float64))
        m, lo, la = month[..., None], lon[..., None], lat[..., None]
        x, y = np.radians(lo), np.radians(la)
        out = self.lat_amp * np.cos(np.pi * la / 90.0)
        amp = self.seas_amp * (1.0 + self.continentality * self.continentality_field(lon, lat))
        out = out + amp * np.cos(2.0 * np.pi * (m - self.seas_phase) / 12.0) * np.sign(la)
        waves = np.sin(self.tex_alpha * x + self.tex_beta * y + self.tex_gamma)  # (..., 8)
        out = out + waves @ self.tex_amp.T
        out = out + self.elev_amp * self.elevation(lon, lat)[..., None]
        return out


def _check_dims(width: int, height: int, n_vars: int) -> None:
    if width < 8 or height < 8:
        raise ValueError("grid must be at least 8x8")
    if not 1 <= n_vars <= 16:
        raise ValueError("n_vars must be in 1..16")


def rasterize(climate: SyntheticClimate, width: int, height: int, land_fraction: float = 0.6,
              extent=GLOBAL_EXTENT) -> ClimGrid:
    _check_dims(width, height, climate.n_vars)
    if not 0.3 <= land_fraction <= 1.0:
        raise ValueError("land_fraction must be in [0.3, 1]")
    probe = ClimGrid(np.zeros((MONTHS, 1, height, width), np.float32), np.ones((height, width), bool), extent)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    lon, lat = probe.pixel_to_lonlat(rows, cols)
    months = np.arange(1, MONTHS + 1)[:, None, None]
    vals = climate.evaluate(months, lon[None], lat[None])  # (12, H, W, V)
    values = vals.transpose(0, 3, 1, 2).astype(np.float32)
    land_field = climate.land(lon, lat)
    threshold = np.quantile(land_field, 1.0 - land_fraction)
    mask = land_field >= threshold
    return ClimGrid(values, mask, extent)


def generate_synthetic_climatology(width: int, height: int, n_vars: int, seed: int,
                                   land_fraction: float = 0.6) -> ClimGrid:
    """Deterministic desk-scale climatology; normalization is not fitted yet."""
    _check_dims(width, height, n_vars)
    return rasterize(SyntheticClimate.from_seed(n_vars, seed), width, height, land_fraction)


def fit_normalization(grid: ClimGrid) -> ClimGrid:
    """Per-variable mean/std over all months and land pixels (population std)."""
    if not grid.land_mask.any():
        raise ValueError("land mask is empty")
    land = grid.values[:, :, grid.land_mask].astype(np.float64)  # (12, V, n_land)
    if not np.all(np.isfinite(land)):
        raise ValueError("non-finite values on land pixels")
    mean = land.mean(axis=(0, 2))
    std = land.std(axis=(0, 2))
    if np.any(std <= 0):
        bad = int(np.flatnonzero(std <= 0)[0])
        raise ValueError(f"variable {bad} has zero variance")
    return ClimGrid(grid.values, grid.land_mask, grid.extent, mean, std)


# -- pretraining sampler ---------------------------------------------------


@dataclass
class SampleBatch:
    encodings: np.ndarray  # (B, 4), or (B, 2) for all-months mode
    targets: np.ndarray  # (B, V), or (B, 12 * V)
    months: np.ndarray  # (B,), 0 in all-months mode
    pixels: np.ndarray  # positions into grid.land_index

    def __len__(self) -> int:
        return self.targets.shape[0]


MONTH_POLICIES = ("random", "march", "all")


@dataclass
class EpochPlan:
    """One pass over the land pixels in a seeded order.

    The order and per-visit months are drawn up front, so any number of readers can
    materialize batches by index and see the same stream.
    """

    grid: ClimGrid
    batch_size: int
    seed: int
    month_policy: str = "random"
    order: np.ndarray = field(init=False)
    months: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.month_policy not in MONTH_POLICIES:
            raise ValueError(f"month_policy must be one of {MONTH_POLICIES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = self.grid.land_index.size
        if n == 0:
            raise ValueError("land mask is empty")
        self.order = np.random.default_rng(derive_seed(self.seed, "visit-order")).permutation(n)
        months = np.random.default_rng(derive_seed(self.seed, "visit-month")).integers(1, MONTHS + 1, n)
        if self.month_policy == "march":
            months = np.full(n, 3)
        elif self.month_policy == "all":
            months = np.zeros(n, dtype=np.int64)
        self.months = months

    def __len__(self) -> int:
        return -(-self.order.size // self.batch_size)

    def batch(self, i: int) -> SampleBatch:
        sl = slice(i * self.batch_size, (i + 1) * self.batch_size)
        pix = self.order[sl]
        months = self.months[sl]
        lon, lat = self.grid.land_lonlat
        table = self.grid.land_values
        if self.month_policy == "all":
            enc = encode_batch(lon[pix], lat[pix], validate=False)
            tgt = table[pix].reshape(pix.size, -1)
        else:
            enc = encode_batch(lon[pix], lat[pix], months, validate=False)
            tgt = table[pix, months - 1]
        return SampleBatch(enc.astype(np.float32), tgt, months, pix)

    def __iter__(self) -> Iterator[SampleBatch]:
        for i in range(len(self)):
            yield self.batch(i)


def sample_epoch(grid: ClimGrid, batch_size: int, seed: int, month_policy: str = "random") -> Iterator[SampleBatch]:
    return iter(EpochPlan(grid, batch_size, seed, month_policy))
