"""Desk-scale presets shared by the CLI, the experiment scripts and the tests."""

from __future__ import annotations

from dataclasses import replace

from .net import NetworkConfig
from .train import TrainConfig

DESK_GRID = {"width": 64, "height": 32, "n_vars": 8}
DESK_NET = NetworkConfig(depth=8, hidden_dim=128, embedding_dim=128)
DESK_TRAIN = TrainConfig(batch_size=16, max_epochs=20)
# Ablation and analysis runs train longer so month-resolved structure has converged.
ABLATION_TRAIN = replace(DESK_TRAIN, max_epochs=60)
# Depth sweeps: a smaller step size keeps deep plain SIRENs from diverging; early
# stopping off so every cell takes the same number of steps.
SWEEP_TRAIN = TrainConfig(batch_size=16, learning_rate=1e-5, max_epochs=30, early_stopping=False)
DESK_TASKS = {
    "biomes": {"n_points": 1000, "n_classes": 5},
    "sdm": {"n_species": 10, "n_occurrences": 3000},
    "traits": {"n_points": 1000, "n_targets": 8},
}
