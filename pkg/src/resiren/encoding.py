"""Direct spatio-temporal positional encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

EPOCH_VALUES = (-1.0, -0.33, 0.33, 1.0)
SEASONAL_MONTHS = (3, 6, 9, 12)


class EncodingError(ValueError):
    """Raised for an out-of-range coordinate; ``field`` names the offending input."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _check(lon_deg, lat_deg, month, epoch=None) -> None:
    lon = np.asarray(lon_deg, dtype=np.float64)
    lat = np.asarray(lat_deg, dtype=np.float64)
    mon = np.asarray(month)
    if not np.all(np.isfinite(lon)) or np.any(np.abs(lon) > 180.0):
        raise EncodingError("lon_deg", "must lie in [-180, 180]")
    if not np.all(np.isfinite(lat)) or np.any(np.abs(lat) > 90.0):
        raise EncodingError("lat_deg", "must lie in [-90, 90]")
    if np.any(mon != np.round(mon)) or np.any(mon < 1) or np.any(mon > 12):
        raise EncodingError("month", "must be an integer in 1..12")
    if epoch is not None:
        ep = np.asarray(epoch, dtype=np.float64)
        if not np.all(np.isin(ep, EPOCH_VALUES)):
            raise EncodingError("epoch", f"must be one of {EPOCH_VALUES}")


@dataclass(frozen=True)
class GeoTemporalPoint:
    lon_deg: float
    lat_deg: float
    month: int
    epoch: Optional[float] = None

    def __post_init__(self):
        _check(self.lon_deg, self.lat_deg, self.month, self.epoch)


def wrap_month(month: int) -> int:
    """Map any integer month onto 1..12 (13 -> 1, 0 -> 12)."""
    return (int(month) - 1) % 12 + 1


def encode_position(pt: GeoTemporalPoint) -> np.ndarray:
    """``[lon/180, lat/90, sin(2*pi*m/12), cos(2*pi*m/12)]`` plus the epoch code if set."""
    angle = 2.0 * math.pi * pt.month / 12.0
    values = [pt.lon_deg / 180.0, pt.lat_deg / 90.0, math.sin(angle), math.cos(angle)]
    if pt.epoch is not None:
        values.append(float(pt.epoch))
    return np.array(values, dtype=np.float64)


def encode_batch(lon_deg, lat_deg, month=None, epoch=None, validate: bool = True) -> np.ndarray:
    """Vectorized encoding. ``month=None`` gives the location-only ``[lon, lat]`` encoding."""
    lon = np.asarray(lon_deg, dtype=np.float64).reshape(-1)
    lat = np.asarray(lat_deg, dtype=np.float64).reshape(-1)
    if month is None:
        if validate:
            _check(lon, lat, 1)
        return np.stack([lon / 180.0, lat / 90.0], axis=1)
    mon = np.broadcast_to(np.asarray(month), lon.shape)
    if validate:
        _check(lon, lat, mon, epoch)
    angle = 2.0 * np.pi * mon.astype(np.float64) / 12.0
    cols = [lon / 180.0, lat / 90.0, np.sin(angle), np.cos(angle)]
    if epoch is not None:
        cols.append(np.broadcast_to(np.asarray(epoch, dtype=np.float64), lon.shape))
    return np.stack(cols, axis=1)
