import csv
import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from resiren.analysis import (ABLATION_ROWS, OUT_OF_SCOPE_ROWS, SCALING_HEADER, VARIANTS, cell_local_variance,
                              cell_mean, checkpoint_predictor, export_prediction_grid, local_variance, median_loss,
                              reconstruction_error, run_ablations, scaling_sweep, task_policy, write_scaling_csv)
from resiren.data import ClimGrid, fit_normalization
from resiren.net import NetworkConfig
from resiren.probe import EmbeddingProvider, ProbeSpec, fit_probe, embed_dataset
from resiren.tasks import build_biomes_task, build_sdm_task, build_traits_task
from resiren.train import TrainConfig, pretrain

TINY_NET = NetworkConfig(depth=3, hidden_dim=16, embedding_dim=8)
TINY_TRAIN = TrainConfig(batch_size=32, max_epochs=2, learning_rate=1e-3)


@pytest.fixture(scope="module")
def small_ckpt(small_grid):
    return pretrain(small_grid, TINY_NET, TINY_TRAIN)[0]


def oracle(grid):
    return lambda lon, lat, month: grid.lookup(lon, lat, month)


def test_oracle_has_zero_error(desk_grid):
    rep = reconstruction_error(oracle(desk_grid), desk_grid, 500, cells=(8, 16))
    assert rep.global_mae == 0.0
    assert np.all(rep.var_quantiles == 0) and np.all(rep.month_mae == 0)
    assert np.allclose(rep.var_mean_log, np.log(1e-6))


def test_error_partition_identities(small_ckpt, small_grid):
    rep = reconstruction_error(small_ckpt, small_grid, 200, cells=(4, 8))
    assert rep.month_counts.sum() == 200 * 12 * small_grid.n_vars
    by_month = np.sum(rep.month_mae * rep.month_counts) / rep.month_counts.sum()
    assert by_month == pytest.approx(rep.global_mae, abs=1e-6)
    filled = rep.cell_counts > 0
    by_cell = np.sum(rep.cell_mae[filled] * rep.cell_counts[filled]) / rep.cell_counts.sum()
    assert by_cell == pytest.approx(rep.global_mae, abs=1e-6)
    assert rep.cell_counts.sum() == 200
    assert np.all(np.isnan(rep.cell_mae[~filled]))
    assert rep.var_mae.mean() == pytest.approx(rep.global_mae, abs=1e-6)
    assert np.all(np.diff(rep.var_quantiles, axis=1) >= 0)


def test_error_report_files(small_ckpt, small_grid, tmp_path):
    rep = reconstruction_error(small_ckpt, small_grid, 50, cells=(2, 4))
    rep.write(tmp_path)
    data = json.loads((tmp_path / "errors.json").read_text())
    assert data["global_mae"] == rep.global_mae
    with open(tmp_path / "errors_by_month.csv") as fh:
        assert len(list(csv.reader(fh))) == 13
    with open(tmp_path / "cell_mae.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 8


def test_error_rejects_bad_predictor(small_grid):
    with pytest.raises(ValueError):
        reconstruction_error(lambda lon, lat, m: np.zeros((lon.size, 1)), small_grid, 10)
    with pytest.raises(ValueError):
        reconstruction_error(oracle(small_grid), small_grid, 0)


def test_cell_mean_hand_example():
    lon = np.array([-90.0, -90.0, 90.0])
    lat = np.array([45.0, 45.0, -45.0])
    mean, counts = cell_mean((-180, 180, -90, 90), (2, 2), lon, lat, np.array([1.0, 3.0, 5.0]))
    assert counts.tolist() == [[2, 0], [0, 1]]
    assert mean[0, 0] == 2.0 and mean[1, 1] == 5.0 and np.isnan(mean[0, 1])


def test_local_variance_of_spatially_flat_grid_is_zero(tiny_grid):
    values = np.broadcast_to(np.arange(12, dtype=np.float32)[:, None, None, None], tiny_grid.values.shape)
    flat = fit_normalization(ClimGrid(values.copy(), tiny_grid.land_mask))
    assert np.all(local_variance(flat)[tiny_grid.land_mask] == 0)
    assert np.any(local_variance(tiny_grid)[tiny_grid.land_mask] > 0)


def test_error_concentrates_in_rough_cells(desk_grid, desk_run_long):
    ckpt, _ = desk_run_long
    rep = reconstruction_error(ckpt, desk_grid, desk_grid.land_index.size, cells=(16, 32))
    rough = cell_local_variance(desk_grid, (16, 32))
    ok = np.isfinite(rep.cell_mae) & np.isfinite(rough)
    assert spearmanr(rep.cell_mae[ok], rough[ok]).statistic > 0.2


def test_concat_months_predictor(small_grid):
    ckpt, _ = pretrain(small_grid, TINY_NET, TrainConfig(batch_size=32, max_epochs=1, concat_months=True))
    pred = checkpoint_predictor(ckpt)
    lon, lat = small_grid.land_lonlat
    out = [pred(lon[:5], lat[:5], m) for m in (1, 7)]
    assert out[0].shape == (5, small_grid.n_vars) and not np.array_equal(out[0], out[1])
    assert np.isfinite(reconstruction_error(ckpt, small_grid, 30).global_mae)


def test_task_policy():
    class DS:
        has_months = True
    assert task_policy(DS()) == "obs"
    DS.has_months = False
    assert task_policy(DS()) == "seasonal"
    assert task_policy(DS(), "rec") == "rec"


def test_scaling_sweep_shape(small_grid, tmp_path):
    res = scaling_sweep(small_grid, depths=(2, 3), seeds=(0, 1), net_cfg=TINY_NET,
                        train_cfg=TrainConfig(batch_size=32, max_epochs=2, learning_rate=1e-4))
    assert len(res) == 2 * 2 * 2
    assert {(r.depth, r.mode, r.seed) for r in res} == {(d, m, s) for d in (2, 3) for m in ("siren", "resiren")
                                                         for s in (0, 1)}
    steps = {r.steps for r in res}
    assert len(steps) == 1
    write_scaling_csv(tmp_path / "s.csv", res)
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == SCALING_HEADER and len(rows) == 9
    with pytest.raises(KeyError):
        median_loss(res, 5, "siren")


def test_depth_two_modes_identical(small_grid):
    res = scaling_sweep(small_grid, depths=(2,), seeds=(4,), net_cfg=TINY_NET, train_cfg=TINY_TRAIN)
    by_mode = {r.mode: r.final_loss for r in res}
    assert by_mode["siren"] == by_mode["resiren"]


def test_scaling_sweep_with_probe(small_grid):
    ds = build_traits_task(small_grid, 60, 2, seed=0)
    res = scaling_sweep(small_grid, depths=(3,), modes=("resiren",), seeds=(0,), net_cfg=TINY_NET,
                        train_cfg=TINY_TRAIN, task=ds, probe_spec=ProbeSpec(task="regression", epochs=2, n_inits=1))
    assert res[0].probe_metric is not None and np.isfinite(res[0].probe_metric)
    with pytest.raises(ValueError):
        scaling_sweep(small_grid, modes=("quarter",))


def test_ablation_variants_change_one_field():
    base_net, base_train = TINY_NET, TINY_TRAIN
    full = VARIANTS["full"].configs(base_net, base_train)
    assert full == (base_net, base_train)
    net, train = VARIANTS["no_hsiren"].configs(base_net, base_train)
    diff = [k for k in base_net.to_dict() if base_net.to_dict()[k] != net.to_dict()[k]]
    assert diff == ["first_layer"] and train == base_train
    _, march = VARIANTS["march_only"].configs(base_net, base_train)
    assert march.march_only and not base_train.march_only


def test_ablation_table(small_grid, tmp_path):
    tasks = [build_biomes_task(small_grid, 60, 3, seed=0), build_sdm_task(small_grid, 3, 80, seed=0)]
    table = run_ablations(small_grid, tasks, TINY_NET, TrainConfig(batch_size=32, max_epochs=1),
                          seeds=(0,), n_inits=1)
    assert [r.name for r in table.rows] == list(ABLATION_ROWS)
    for name in OUT_OF_SCOPE_ROWS:
        assert table.row(name).status == "out of scope" and table.row(name).metrics == {}
    for name in VARIANTS:
        row = table.row(name)
        assert row.status == "ok" and set(row.metrics) == {"classification", "sdm"}
        assert all(len(r.values) == 1 for r in row.reports)
    table.write_csv(tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ablation", "status", "classification_macro_f1", "sdm_top1"]
    assert len(rows) == 1 + len(ABLATION_ROWS)
    table.to_json(tmp_path / "a.json")
    assert json.loads((tmp_path / "a.json").read_text())["seeds"] == [0]
    with pytest.raises(ValueError):
        run_ablations(small_grid, tasks, TINY_NET, TINY_TRAIN, rows=("satclip",))


def test_constant_probe_gives_constant_grid(small_ckpt, tmp_path):
    g = export_prediction_grid(small_ckpt, lambda f: np.full(f.shape[0], 0.25), resolution=(6, 10),
                               path=tmp_path / "g.csv")
    assert g.values.shape == (6, 10) and np.all(g.values == 0.25)
    assert g.lon.size == 10 and g.lat.size == 6 and g.lat[0] > g.lat[-1]
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 1 + 60


def test_prediction_grid_depends_on_month(small_ckpt, small_grid):
    ds = build_sdm_task(small_grid, 3, 120, seed=0)
    provider = EmbeddingProvider(small_ckpt, "obs")
    model = fit_probe(embed_dataset(provider, ds), ds.targets, ds.split, ProbeSpec(task="sdm", epochs=3, n_inits=1,
                      n_background=32), 0, 3, bank=np.random.default_rng(0).normal(size=(12, 32, 8)),
                      months=ds.month)
    march = export_prediction_grid(provider, model, resolution=(8, 16), month=3)
    sept = export_prediction_grid(provider, model, resolution=(8, 16), month=9)
    assert march.values.shape == (8, 16) and np.all((march.values >= 0) & (march.values <= 1))
    assert not np.allclose(march.values, sept.values)


def test_prediction_grid_validation(small_ckpt):
    with pytest.raises(ValueError):
        export_prediction_grid(small_ckpt, lambda f: f, resolution=(0, 3))
    with pytest.raises(ValueError):
        export_prediction_grid(small_ckpt, lambda f: f, region=(10, 0, -10, 10))
