import numpy as np
import pytest
from hypothesis import given, strategies as st

import resiren.train as train_mod
from resiren.data import EpochPlan
from resiren.net import NetworkConfig, NonFiniteError, ParameterSet, forward, init_parameters
from resiren.train import (EarlyStopping, OptimizerState, TrainConfig, evaluate_mse, mse_loss, pretrain,
                           pretraining_config, train_step, write_history_csv)

from _oracles import reference_adam

TINY_NET = NetworkConfig(depth=3, hidden_dim=16, embedding_dim=8)
TINY_TRAIN = TrainConfig(batch_size=64, max_epochs=3)


def test_mse_examples():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))[0] == 0.0
    loss, grad = mse_loss(np.array([[0.0, 0.0]]), np.array([[1.0, 3.0]]))
    assert loss == 5.0
    assert np.array_equal(grad, [[-1.0, -3.0]])
    with pytest.raises(ValueError):
        mse_loss(np.zeros(2), np.zeros(3))


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_mse_matches_loop(pairs):
    p = np.array([a for a, _ in pairs])
    t = np.array([b for _, b in pairs])
    expect = sum((a - b) ** 2 for a, b in pairs) / len(pairs)
    assert mse_loss(p, t)[0] == pytest.approx(expect, rel=1e-12, abs=1e-12)


def _params():
    return ParameterSet(TINY_NET, init_parameters(TINY_NET, 0).flat.astype(np.float64))


def test_adam_zero_gradient_is_noop():
    p = _params()
    before = p.flat.copy()
    state = OptimizerState.like(p)
    for _ in range(3):
        train_mod.adam_step(p, np.zeros_like(p.flat), state, TrainConfig())
    assert np.array_equal(p.flat, before)


def test_adam_first_step_size():
    p = _params()
    before = p.flat.copy()
    cfg = TrainConfig(learning_rate=1e-3)
    g = np.random.default_rng(0).normal(size=p.flat.size)
    train_mod.adam_step(p, g, OptimizerState.like(p), cfg)
    step = before - p.flat
    assert np.allclose(np.abs(step), 1e-3, rtol=1e-4)
    assert np.all(np.sign(step) == np.sign(g))


def test_adam_matches_reference():
    p = _params()
    theta0 = p.flat.copy()
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=p.flat.size) for _ in range(2)]
    state = OptimizerState.like(p)
    cfg = TrainConfig(learning_rate=1e-3)
    for g in grads:
        train_mod.adam_step(p, g, state, cfg)
    for i in range(0, p.flat.size, 97):
        ref = reference_adam(float(theta0[i]), [float(g[i]) for g in grads])[-1]
        assert abs(p.flat[i] - ref) < 1e-9


def test_adam_rejects_non_finite():
    p = _params()
    g = np.zeros_like(p.flat)
    g[5] = np.nan
    with pytest.raises(NonFiniteError):
        train_mod.adam_step(p, g, OptimizerState.like(p), TrainConfig())


def test_early_stopping_rule():
    stop = EarlyStopping(patience=3)
    assert [stop.update(x) for x in [1.0, 0.5, 0.6, 0.5, 0.4, 0.4, 0.41, 0.4]] == [
        False, False, False, False, False, False, False, True]


def test_pretrain_stops_after_three_flat_epochs(desk_grid, monkeypatch):
    monkeypatch.setattr(train_mod, "train_step", lambda *a, **k: 1.0)
    _, history = pretrain(desk_grid, TINY_NET, TrainConfig(batch_size=4096, max_epochs=20))
    assert len(history) == 4
    _, history = pretrain(desk_grid, TINY_NET, TrainConfig(batch_size=4096, max_epochs=6, early_stopping=False))
    assert len(history) == 6


def test_single_step_decreases_loss(desk_grid):
    cfg = pretraining_config(TINY_NET, desk_grid, TrainConfig())
    params = init_parameters(cfg, 3)
    batch = EpochPlan(desk_grid, 256, 0).batch(0)
    before = mse_loss(forward(cfg, params, batch.encodings)[1], batch.targets)[0]
    train_step(cfg, params, OptimizerState.like(params), batch.encodings, batch.targets,
               TrainConfig(learning_rate=1e-5))
    after = mse_loss(forward(cfg, params, batch.encodings)[1], batch.targets)[0]
    assert after < before


def test_pretrain_reproducible(small_grid):
    a, ha = pretrain(small_grid, TINY_NET, TINY_TRAIN)
    b, hb = pretrain(small_grid, TINY_NET, TINY_TRAIN)
    assert [r.mean_loss for r in ha] == [r.mean_loss for r in hb]
    assert a.params.flat.tobytes() == b.params.flat.tobytes()


def test_pretrain_keeps_best_epoch(small_grid):
    ckpt, history = pretrain(small_grid, TINY_NET, TrainConfig(batch_size=64, max_epochs=5, learning_rate=1e-3))
    losses = [r.mean_loss for r in history]
    assert ckpt.metadata["final_loss"] == min(losses)
    assert ckpt.metadata["best_epoch"] == int(np.argmin(losses)) + 1
    assert ckpt.metadata["steps"] == len(history) * int(np.ceil(small_grid.land_index.size / 64))
    assert ckpt.config.input_dim == 4 and ckpt.config.output_dim == small_grid.n_vars


def test_pretrain_learns(small_grid):
    ckpt, history = pretrain(small_grid, TINY_NET, TrainConfig(batch_size=32, max_epochs=8, learning_rate=1e-3))
    assert history[-1].mean_loss < history[0].mean_loss
    assert evaluate_mse(ckpt, None, small_grid) < 1.0


def test_concat_months_shapes(small_grid):
    ckpt, _ = pretrain(small_grid, TINY_NET, TrainConfig(batch_size=64, max_epochs=1, concat_months=True))
    assert ckpt.config.input_dim == 2 and ckpt.config.output_dim == 12 * small_grid.n_vars
    assert np.isfinite(evaluate_mse(ckpt, None, small_grid))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(march_only=True, concat_months=True)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def test_requires_normalized_grid():
    from resiren.data import generate_synthetic_climatology
    with pytest.raises(ValueError, match="normalized"):
        pretrain(generate_synthetic_climatology(8, 8, 1, 0), TINY_NET, TINY_TRAIN)


def test_history_csv(tmp_path, small_grid):
    _, history = pretrain(small_grid, TINY_NET, TINY_TRAIN)
    write_history_csv(tmp_path / "loss.csv", history)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,wallclock_s" and len(lines) == len(history) + 1
    assert float(lines[1].split(",")[1]) == history[0].mean_loss
