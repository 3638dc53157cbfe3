"""RSRN checkpoint files.

Layout (little-endian): ``"RSRN" | u32 version | config JSON | u32 n_vars |
f64 mean[n_vars] | f64 std[n_vars] | metadata JSON | u64 n_params | f32 params |
u32 crc32``. JSON blocks are length-prefixed with a u32.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ._binary import FormatError, Reader, pack_json, seal, unseal
from .net import NetworkConfig, ParameterSet

MAGIC = b"RSRN"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: ParameterSet
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.dtype != np.float32:
            self.params = self.params.astype(np.float32)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float64)

    def to_bytes(self) -> bytes:
        n_vars = self.norm_mean.size
        parts = [
            pack_json(self.config.to_dict()),
            struct.pack("<I", n_vars),
            self.norm_mean.astype("<f8").tobytes(),
            self.norm_std.astype("<f8").tobytes(),
            pack_json(self.metadata),
            struct.pack("<Q", self.params.flat.size),
            self.params.flat.astype("<f4").tobytes(),
        ]
        return seal(MAGIC, VERSION, b"".join(parts))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        rd = Reader(unseal(data, MAGIC, VERSION))
        cfg = NetworkConfig.from_dict(rd.json())
        (n_vars,) = rd.unpack("<I")
        mean = np.frombuffer(rd.take(8 * n_vars), dtype="<f8").astype(np.float64)
        std = np.frombuffer(rd.take(8 * n_vars), dtype="<f8").astype(np.float64)
        meta = rd.json()
        (n_params,) = rd.unpack("<Q")
        if n_params != cfg.n_parameters:
            raise FormatError(f"parameter count {n_params} does not match config ({cfg.n_parameters})")
        flat = np.frombuffer(rd.take(4 * n_params), dtype="<f4").astype(np.float32)
        rd.done()
        return cls(cfg, ParameterSet(cfg, flat), mean, std, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    """Write ``ckpt`` to ``path``; returns the file size in bytes."""
    data = ckpt.to_bytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
