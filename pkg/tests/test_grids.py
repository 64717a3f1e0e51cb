import numpy as np
import pandas as pd
import pytest
import torch
import xarray as xr
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import CatalogMismatchError, ConfigurationError, DegenerateStatisticsError, GeometryError
from grids import (
    CatalogEntry,
    FieldStore,
    GridSpec,
    NormStats,
    VariableCatalog,
    WindowDataset,
    calendar_weeks,
    compute_norm_stats,
    draw_regimes,
    latitude_weights,
    load_archive,
    make_sequences,
    open_cache,
    shift_longitude,
    smooth_field,
    synth_toy,
    weekly_climatology,
    write_cache,
)


@given(st.integers(min_value=1, max_value=90))
def test_latitude_weights_average_to_one(n_lat):
    weights = latitude_weights(GridSpec.regular(n_lat, 4))
    assert weights.shape == (n_lat,)
    assert np.all(weights > 0)
    np.testing.assert_allclose(weights.mean(), 1.0, rtol=1e-12)
    np.testing.assert_allclose(weights, weights[::-1], rtol=1e-12)


def test_regular_grid_matches_weatherbench_centres():
    grid = GridSpec.regular(32, 64)
    assert grid.shape == (32, 64)
    assert grid.resolution_deg == 5.625
    np.testing.assert_allclose(grid.lat_deg[[0, -1]], [-87.1875, 87.1875])
    grid.validate_global()


def test_grid_rejects_irregular_longitudes():
    with pytest.raises(GeometryError):
        GridSpec(np.array([0.0, 10.0]), np.array([0.0, 10.0, 30.0]))


def test_nearest_index_wraps_longitude():
    grid = GridSpec.regular(32, 64)
    assert grid.nearest_index(51.5, 359.9) == (25, 0)
    assert grid.nearest_index(51.5, -0.1) == (25, 0)


def test_default_catalog_layout():
    catalog = VariableCatalog.default()
    assert catalog.n_in == 71
    assert catalog.n_out == 69
    assert catalog.resolve_field("Z500") == 7
    assert catalog.resolve_field("T850") == 13 + 10
    assert catalog.resolve_field("T2M") == 65
    assert catalog.resolve_field("TP") == 68
    assert catalog.is_constant(69) and catalog.is_constant(70)
    assert catalog.output_index(68) == 68
    assert catalog.entry_of_channel(68).score_scale == 1000.0
    with pytest.raises(CatalogMismatchError):
        catalog.output_index(70)


def test_toy_catalog_and_serialisation(toy_catalog):
    assert toy_catalog.channel_names() == ["tracer_0", "tracer_1", "static_0"]
    assert toy_catalog.n_out == 2
    restored = VariableCatalog.from_dict(toy_catalog.to_dict())
    assert restored.same_layout(toy_catalog)


def test_constant_channel_is_time_invariant(advection_store):
    np.testing.assert_array_equal(advection_store[2, 0], advection_store[2, 39])


def test_advection_store_rolls_one_cell_per_step(advection_store):
    np.testing.assert_array_equal(advection_store.field(0, 5), np.roll(advection_store.field(0, 0), 5, axis=-1))


def test_make_sequences_shapes_and_count(advection_store, advection_stats):
    samples = list(make_sequences(advection_store, advection_stats, t_hist=6, t_pred=20))
    assert len(samples) == 40 - 26 + 1
    assert samples[0].history.shape == (3, 6, 8, 16)
    assert samples[0].target.shape == (2, 20, 8, 16)
    assert samples[0].init_time == advection_store.times[5]


def test_make_sequences_respects_time_range(advection_store, advection_stats):
    samples = list(
        make_sequences(advection_store, advection_stats, 2, 3, time_range=("2015-01-01", "2015-01-05 18:00"))
    )
    assert len(samples) == 20 - 5 + 1


def test_shards_partition_the_windows(advection_store, advection_stats):
    every = [s.init_time for s in make_sequences(advection_store, advection_stats, 2, 3)]
    shards = [
        [s.init_time for s in make_sequences(advection_store, advection_stats, 2, 3, shard=(i, 3))] for i in range(3)
    ]
    assert sorted(t for shard in shards for t in shard) == sorted(every)
    assert len(set(shards[0]) & set(shards[1])) == 0


def test_window_dataset_returns_tensors(advection_store, advection_stats):
    dataset = WindowDataset(advection_store, advection_stats, 2, 3, stride=2)
    history, target = dataset[1]
    assert len(dataset) == len(range(0, 40 - 5 + 1, 2))
    assert isinstance(history, torch.Tensor)
    assert tuple(history.shape) == (3, 2, 8, 16)
    assert tuple(target.shape) == (2, 3, 8, 16)


def test_normalised_training_channels_are_standardised(advection_store, advection_stats):
    values = advection_stats.normalize(advection_store.channel_array(0)[None], channels=[0])
    np.testing.assert_allclose(values.mean(), 0.0, atol=1e-4)
    np.testing.assert_allclose(values.std(), 1.0, atol=1e-4)
    assert advection_stats.std[2] == 1.0


def test_normalize_inverts_for_numpy_and_torch(advection_stats, rng):
    x = rng.normal(size=(2, 3, 4, 8, 16)).astype(np.float64)
    back = advection_stats.denormalize(advection_stats.normalize(x, channel_axis=1), channel_axis=1)
    np.testing.assert_allclose(back, x, atol=1e-10)
    t = torch.from_numpy(x)
    np.testing.assert_allclose(advection_stats.normalize(t, channel_axis=1).numpy(), advection_stats.normalize(x, channel_axis=1))


def test_zero_variance_channel_is_rejected(toy_grid, toy_catalog):
    data = np.zeros((3, 10, 8, 16), dtype=np.float32)
    store = FieldStore.from_array(data, pd.date_range("2015-01-01", periods=10, freq="6h"), toy_grid, toy_catalog)
    with pytest.raises(DegenerateStatisticsError, match="tracer_0"):
        compute_norm_stats(store)


def test_empty_training_range_is_a_configuration_error(advection_store):
    with pytest.raises(ConfigurationError):
        compute_norm_stats(advection_store, ("2030-01-01", "2030-12-31"))


def test_calendar_weeks_fold_week_53():
    weeks = calendar_weeks(pd.DatetimeIndex(["2015-01-01", "2015-06-15", "2015-12-31"]))
    assert weeks[0] == 0
    assert weeks[-1] == 51
    assert weeks.min() >= 0 and weeks.max() <= 51


def test_weekly_climatology_is_idempotent(toy_grid, toy_catalog):
    store = synth_toy("annual-cycle", toy_grid, 4 * 365, seed=3, catalog=toy_catalog)
    clim = weekly_climatology(store, None, None)
    assert clim.shape == (52, 3, 8, 16)

    weeks = calendar_weeks(store.times)
    data = np.moveaxis(clim[weeks], 0, 1)
    replay = FieldStore.from_array(data, store.times, toy_grid, toy_catalog)
    np.testing.assert_allclose(weekly_climatology(replay, None, None), clim, rtol=1e-6)


def test_annual_cycle_climatology_peaks_in_summer(toy_grid, toy_catalog):
    store = synth_toy("annual-cycle", toy_grid, 4 * 365, seed=3, catalog=toy_catalog)
    clim = weekly_climatology(store, None, None, channels=[0])
    anomaly = clim[:, 0].mean(axis=(-2, -1))
    assert 22 <= int(np.argmax(anomaly)) <= 27
    assert int(np.argmin(anomaly)) in (0, 1, 50, 51)


def test_short_climatology_range_is_rejected(advection_store):
    with pytest.raises(ConfigurationError):
        weekly_climatology(advection_store, None, None)


def test_stochastic_advection_follows_regime_drift(toy_grid, toy_catalog):
    store = synth_toy("stochastic-advection", toy_grid, 52, seed=5, catalog=toy_catalog, t_hist=6, segment_steps=26)
    meta = store.metadata
    assert len(meta["regimes"]) == 2
    for segment, regime in enumerate(meta["regimes"]):
        v = int(meta["regime_velocities"][regime])
        seg0 = segment * 26
        frames = store.channel_array(0, slice(seg0, seg0 + 26))
        for i in range(5):
            np.testing.assert_array_equal(frames[i + 1], frames[i])
        for i in range(5, 25):
            np.testing.assert_array_equal(frames[i + 1], np.roll(frames[i], v, axis=-1))


def test_regimes_are_drawn_with_equal_probability():
    regimes = draw_regimes(10_000, 0)
    assert set(np.unique(regimes)) == {0, 1}
    assert abs(regimes.mean() - 0.5) < 0.02


def test_fractional_longitude_shift_composes(rng):
    field = smooth_field(rng, 8, 16)
    twice = shift_longitude(shift_longitude(field, 0.5), 0.5)
    np.testing.assert_allclose(twice, np.roll(field, 1, axis=-1), atol=1e-10)


def test_unknown_toy_kind(toy_grid):
    with pytest.raises(ConfigurationError):
        synth_toy("vortex", toy_grid, 10, seed=0)


def test_cache_reopens_with_identical_fields(tmp_path, advection_store, advection_stats):
    write_cache(advection_store, advection_stats, tmp_path / "cache", {"config_fingerprint": "abc"})
    store, stats, manifest = open_cache(tmp_path / "cache")
    assert manifest["config_fingerprint"] == "abc"
    assert manifest["times"]["step_hours"] == 6.0
    assert store.times.equals(advection_store.times)
    np.testing.assert_array_equal(store.window(3, 9), advection_store.window(3, 9))
    np.testing.assert_allclose(stats.std, advection_stats.std)


def _write_archive(root, levels=(500, 850), n_rows=4):
    pytest.importorskip("netCDF4")
    full = GridSpec.regular(4, 8)
    grid = GridSpec(full.lat_deg[:n_rows], full.lon_deg)
    times = pd.date_range("2015-01-01", periods=8, freq="6h")
    rng = np.random.default_rng(0)
    coords = {"time": times, "lat": grid.lat_deg, "lon": grid.lon_deg}
    z = xr.DataArray(
        rng.normal(size=(8, len(levels), n_rows, 8)).astype(np.float32),
        dims=("time", "level", "lat", "lon"),
        coords={**coords, "level": list(levels)},
    )
    t2m = xr.DataArray(rng.normal(size=(8, n_rows, 8)).astype(np.float32), dims=("time", "lat", "lon"), coords=coords)
    lsm = xr.DataArray(
        (rng.random((n_rows, 8)) > 0.5).astype(np.float32), dims=("lat", "lon"), coords={"lat": grid.lat_deg, "lon": grid.lon_deg}
    )
    for name, var, da in (("geopotential", "z", z), ("2m_temperature", "t2m", t2m), ("constants", "lsm", lsm)):
        (root / name).mkdir(parents=True)
        da.to_dataset(name=var).to_netcdf(root / name / f"{name}_5.625deg.nc")
    return z


def _archive_catalog(levels=(500, 850)):
    return VariableCatalog(
        [
            CatalogEntry("geopotential", "3D", tuple(levels), "z"),
            CatalogEntry("2m_temperature", "2D", (), "t2m"),
            CatalogEntry("land_binary_mask", "constant", (), "lsm"),
        ]
    )


def test_load_archive_reads_weatherbench_layout(tmp_path):
    z = _write_archive(tmp_path)
    store = load_archive(tmp_path, _archive_catalog(), (2015, 2015))
    assert store.catalog.n_in == 4
    assert store.grid.shape == (4, 8)
    assert store.n_times == 8
    np.testing.assert_allclose(store.field(1, 3), z.sel(level=850).values[3])
    np.testing.assert_array_equal(store.field(3, 0), store.field(3, 7))


def test_load_archive_names_the_missing_level(tmp_path):
    _write_archive(tmp_path)
    with pytest.raises(CatalogMismatchError, match="700"):
        load_archive(tmp_path, _archive_catalog((500, 700)), (2015, 2015))


def test_load_archive_rejects_a_regional_grid(tmp_path):
    _write_archive(tmp_path, n_rows=2)
    with pytest.raises(GeometryError, match="do not cover 180"):
        load_archive(tmp_path, _archive_catalog(), (2015, 2015))
