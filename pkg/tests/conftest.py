import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from resiren.data import ClimGrid, fit_normalization, generate_synthetic_climatology
from resiren.presets import ABLATION_TRAIN, DESK_GRID, DESK_NET, DESK_TRAIN
from resiren.train import pretrain

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

# Filled by tests/test_acceptance.py, echoed at the end of the run.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split(".")[0]), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def desk_grid():
    return fit_normalization(generate_synthetic_climatology(DESK_GRID["width"], DESK_GRID["height"],
                                                            DESK_GRID["n_vars"], 0))


@pytest.fixture(scope="session")
def small_grid():
    return fit_normalization(generate_synthetic_climatology(16, 8, 3, 5))


@pytest.fixture(scope="session")
def desk_run(desk_grid):
    """Desk-scale pretraining: (checkpoint, history)."""
    return pretrain(desk_grid, DESK_NET, DESK_TRAIN)


@pytest.fixture(scope="session")
def desk_run_long(desk_grid):
    """Desk-scale pretraining with the ablation budget: (checkpoint, history)."""
    return pretrain(desk_grid, DESK_NET, ABLATION_TRAIN)


@pytest.fixture
def tiny_grid():
    """Three land pixels, one variable, hand-set values."""
    values = np.zeros((12, 1, 2, 2), np.float32)
    values[:, 0] = np.arange(4, dtype=np.float32).reshape(2, 2)
    values[:, 0] += np.arange(12, dtype=np.float32)[:, None, None] / 12.0
    mask = np.array([[True, True], [True, False]])
    return fit_normalization(ClimGrid(values, mask))
