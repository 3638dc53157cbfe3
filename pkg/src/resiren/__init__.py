"""ReSIREN spatio-temporal location encoder pretrained on gridded climatologies."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ClimGrid, fit_normalization, generate_synthetic_climatology, load_grid, save_grid
from .encoding import GeoTemporalPoint, encode_batch, encode_position
from .net import Activation, NetworkConfig, Residual, forward, init_parameters
from .probe import EmbeddingProvider, ProbeReport, ProbeSpec, embed, run_probe_suite
from .train import TrainConfig, pretrain

__all__ = [
    "Activation",
    "Checkpoint",
    "ClimGrid",
    "EmbeddingProvider",
    "GeoTemporalPoint",
    "NetworkConfig",
    "ProbeReport",
    "ProbeSpec",
    "Residual",
    "TrainConfig",
    "embed",
    "encode_batch",
    "encode_position",
    "fit_normalization",
    "forward",
    "generate_synthetic_climatology",
    "init_parameters",
    "load_checkpoint",
    "load_grid",
    "pretrain",
    "run_probe_suite",
    "save_checkpoint",
    "save_grid",
]
