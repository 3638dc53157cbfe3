from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from resiren.data import (ClimGrid, EpochPlan, SyntheticClimate, fit_normalization, generate_synthetic_climatology,
                          rasterize, sample_epoch)


def test_generator_deterministic():
    a = generate_synthetic_climatology(20, 10, 4, 3)
    b = generate_synthetic_climatology(20, 10, 4, 3)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.array_equal(a.land_mask, b.land_mask)
    assert not np.array_equal(a.values, generate_synthetic_climatology(20, 10, 4, 4).values)


@pytest.mark.parametrize("dims", [(7, 8, 2), (8, 7, 2), (8, 8, 0), (8, 8, 17)])
def test_generator_rejects_degenerate_dims(dims):
    with pytest.raises(ValueError):
        generate_synthetic_climatology(*dims, seed=0)


@given(st.integers(0, 2 ** 32), st.floats(-180, 180), st.floats(0.5, 90), st.integers(1, 12))
def test_pure_seasonal_is_odd_in_latitude(seed, lon, lat, month):
    c = SyntheticClimate.from_seed(3, seed).pure_seasonal()
    north = c.evaluate(month, lon, lat)
    south = c.evaluate(month, lon, -lat)
    assert np.allclose(north, -south, rtol=1e-12, atol=1e-12)


def test_latitudinal_term_alone():
    c = SyntheticClimate.from_seed(2, 0)
    zero = np.zeros_like
    only_lat = type(c)(**{**c.__dict__, "seas_amp": zero(c.seas_amp), "tex_amp": zero(c.tex_amp),
                          "elev_amp": zero(c.elev_amp)})
    lat = np.array([0.0, 45.0, 90.0])
    assert np.allclose(only_lat.evaluate(5, 10.0, lat), c.lat_amp * np.cos(np.pi * lat / 90)[:, None])


@pytest.mark.parametrize("fraction", [0.3, 0.6, 0.9])
def test_land_fraction(fraction):
    g = generate_synthetic_climatology(40, 20, 1, 2, land_fraction=fraction)
    assert g.land_mask.mean() >= 0.3
    assert abs(g.land_mask.mean() - fraction) < 0.02


def test_lookup_matches_direct_evaluation(desk_grid):
    climate = SyntheticClimate.from_seed(desk_grid.n_vars, 0)
    lon, lat = desk_grid.land_lonlat
    rng = np.random.default_rng(0)
    dlon, dlat = desk_grid.pixel_size
    jlon = lon + (rng.random(lon.size) - 0.5) * dlon * 0.99
    jlat = lat + (rng.random(lat.size) - 0.5) * dlat * 0.99
    for m in (1, 4, 12):
        raw = desk_grid.denormalize(desk_grid.lookup(jlon, jlat, m))
        direct = climate.evaluate(m, lon, lat)
        assert np.allclose(raw, direct, rtol=1e-5, atol=1e-5)


def test_pixel_mapping_invertible(desk_grid):
    rows, cols = np.meshgrid(np.arange(desk_grid.height), np.arange(desk_grid.width), indexing="ij")
    lon, lat = desk_grid.pixel_to_lonlat(rows, cols)
    r, c = desk_grid.lonlat_to_pixel(lon, lat)
    assert np.array_equal(r, rows) and np.array_equal(c, cols)
    assert desk_grid.lonlat_to_pixel(180.0, -90.0) == (desk_grid.height - 1, desk_grid.width - 1)


def test_normalization_hand_example():
    values = np.zeros((12, 1, 1, 2), np.float32)
    values[..., 0] = 1.0
    values[..., 1] = 3.0
    g = fit_normalization(ClimGrid(values, np.ones((1, 2), bool)))
    assert g.mean[0] == 2.0 and g.std[0] == 1.0


def test_normalization_errors():
    values = np.ones((12, 2, 3, 3), np.float32)
    with pytest.raises(ValueError, match="variance"):
        fit_normalization(ClimGrid(values, np.ones((3, 3), bool)))
    with pytest.raises(ValueError, match="empty"):
        fit_normalization(ClimGrid(values, np.zeros((3, 3), bool)))


def test_normalized_land_stats(desk_grid):
    land = desk_grid.land_values.astype(np.float64)
    assert np.all(np.abs(land.mean(axis=(0, 1))) < 1e-5)
    assert np.allclose(land.std(axis=(0, 1)), 1.0, atol=1e-5)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
def test_normalize_round_trip(vals):
    g = fit_normalization(generate_synthetic_climatology(8, 8, 1, 0))
    x = np.array(vals)[:, None]
    back = g.denormalize(g.normalize(x))
    assert np.allclose(back, x, rtol=1e-6, atol=1e-9)


def test_sampler_tiny_grid(tiny_grid):
    batches = list(sample_epoch(tiny_grid, 2, seed=0))
    assert [len(b) for b in batches] == [2, 1]
    pix = np.concatenate([b.pixels for b in batches])
    assert sorted(pix.tolist()) == [0, 1, 2]


def test_sampler_targets_match_grid(desk_grid):
    plan = EpochPlan(desk_grid, 100, 4)
    lon, lat = desk_grid.land_lonlat
    for b in plan:
        expect = desk_grid.lookup(lon[b.pixels], lat[b.pixels], b.months)
        assert np.allclose(b.targets, expect, atol=1e-5)
        assert b.encodings.shape == (len(b), 4) and b.encodings.dtype == np.float32


@given(st.integers(0, 2 ** 32), st.integers(1, 500))
def test_epoch_coverage(seed, batch):
    g = fit_normalization(generate_synthetic_climatology(16, 8, 1, 1))
    pix = np.concatenate([b.pixels for b in sample_epoch(g, batch, seed)])
    assert np.array_equal(np.sort(pix), np.arange(g.land_index.size))


def test_month_uniformity(desk_grid):
    months = []
    seed = 0
    while sum(m.size for m in months) < 10 ** 4:
        months.append(EpochPlan(desk_grid, 512, seed).months)
        seed += 1
    counts = np.bincount(np.concatenate(months)[:10 ** 4], minlength=13)[1:]
    assert chisquare(counts).pvalue > 0.001


def test_reader_threads_do_not_change_order(desk_grid):
    plan = EpochPlan(desk_grid, 64, 11)
    seq = [plan.batch(i).pixels for i in range(len(plan))]
    for workers in (2, 4, 8):
        with ThreadPoolExecutor(workers) as pool:
            par = list(pool.map(lambda i: EpochPlan(desk_grid, 64, 11).batch(i).pixels, range(len(plan))))
        assert all(np.array_equal(a, b) for a, b in zip(seq, par))


def test_month_policies_share_visit_order(desk_grid):
    full = EpochPlan(desk_grid, 32, 5, "random")
    march = EpochPlan(desk_grid, 32, 5, "march")
    assert np.array_equal(full.order, march.order)
    assert np.all(march.months == 3)
    b = EpochPlan(desk_grid, 32, 5, "all").batch(0)
    assert b.encodings.shape == (32, 2) and b.targets.shape == (32, 12 * desk_grid.n_vars)


def test_sampler_rejects_unknown_policy(desk_grid):
    with pytest.raises(ValueError):
        EpochPlan(desk_grid, 8, 0, "june")
