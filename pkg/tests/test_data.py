import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from surgekit.data import (
    GaugeSeries, GridSeries, HarmonicSeries, SplitSpec, Standardizer, chronological_split, compute_surge,
    format_time, generate_synthetic, load_grid_series, parse_time, read_series_csv, standardize_fit_apply,
    window_samples, write_grid_series, write_series_csv,
)
from surgekit.data.series import HOUR, fill_short_gaps, hours_since_epoch
from surgekit.data.synthetic import P_REF, ZERO_FORCING, SyntheticConfig
from surgekit.errors import AlignmentError, ConfigError, DataError, IngestionError

T0 = np.datetime64("2020-12-20T00", "h")


def make_series(present, h=3, w=3, seed=0):
    """Grid/gauge/harmonic sharing the hours where ``present`` is True."""
    rng = np.random.default_rng(seed)
    ts = T0 + np.flatnonzero(present) * HOUR
    grid = GridSeries(ts, rng.standard_normal((ts.size, h, w, 3)).astype(np.float32))
    tide = rng.standard_normal(ts.size)
    surge = 0.1 * rng.standard_normal(ts.size)
    return grid, GaugeSeries(ts, tide + surge), HarmonicSeries(ts, tide)


# --- time handling -------------------------------------------------------------

def test_parse_time_forms():
    assert parse_time("2022-09-28T05:00:00Z") == np.datetime64("2022-09-28T05", "h")
    assert parse_time("2022-09-28T01:00:00-04:00") == np.datetime64("2022-09-28T05", "h")
    with pytest.raises(DataError):
        parse_time("2022-09-28T05:30:00Z")
    with pytest.raises(DataError):
        parse_time("yesterday")


def test_fill_short_gaps_interpolates_only_short_ones():
    ts = T0 + np.array([0, 1, 3, 4, 9]) * HOUR
    vals = np.array([0.0, 1.0, 3.0, 4.0, 9.0])
    new_ts, new_vals = fill_short_gaps(ts, vals, 3)
    np.testing.assert_array_equal(hours_since_epoch(new_ts) - hours_since_epoch(T0[None])[0], [0, 1, 2, 3, 4, 9])
    np.testing.assert_array_equal(new_vals, [0, 1, 2, 3, 4, 9])


# --- compute_surge and the target decomposition ------------------------------

def test_compute_surge_exact_and_misalignment():
    grid, gauge, harmonic = make_series(np.ones(10, bool))
    surge = compute_surge(gauge, harmonic)
    np.testing.assert_array_equal(surge.values, gauge.values - harmonic.values)
    shifted = HarmonicSeries(harmonic.timestamps + HOUR, harmonic.values)
    with pytest.raises(AlignmentError, match="index 0"):
        compute_surge(gauge, shifted)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 6))
def test_target_is_tide_plus_surge_exactly(seed, steps, stride):
    rng = np.random.default_rng(seed)
    present = rng.random(80) > 0.1
    grid, gauge, harmonic = make_series(present, seed=seed)
    try:
        s = window_samples(grid, gauge, harmonic, steps, stride)
    except DataError:
        return
    np.testing.assert_array_equal(s.target, s.tide + s.surge)
    idx = hours_since_epoch(s.hourly_index())
    pos = np.searchsorted(hours_since_epoch(gauge.timestamps), idx)
    np.testing.assert_array_equal(s.surge[..., 0], gauge.values[pos] - harmonic.values[pos])
    np.testing.assert_array_equal(s.tide[..., 0], harmonic.values[pos])


# --- window counts ----------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(1, 40), st.integers(1, 30))
def test_window_count_formula_gap_free(length, steps, stride):
    assume(length >= steps)
    s = window_samples(*make_series(np.ones(length, bool), h=1, w=1), steps, stride)
    assert len(s) == (length - steps) // stride + 1
    assert s.report.dropped == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10), st.integers(1, 5))
def test_window_count_with_gaps_matches_enumeration(seed, steps, stride):
    rng = np.random.default_rng(seed)
    present = rng.random(120) > 0.08
    present[0] = present[-1] = True
    grid, gauge, harmonic = make_series(present, h=1, w=1, seed=seed)
    # the loaders interpolate short gaps; apply the same to get the effective coverage
    ts, _ = fill_short_gaps(gauge.timestamps, gauge.values)
    have = np.zeros(120, bool)
    have[hours_since_epoch(ts) - hours_since_epoch(T0[None])[0]] = True
    expect = sum(have[s:s + steps].all() for s in range(0, 120 - steps + 1, stride))
    filled = [GridSeries(*fill_short_gaps(grid.timestamps, grid.grid)),
              GaugeSeries(*fill_short_gaps(gauge.timestamps, gauge.values)),
              HarmonicSeries(*fill_short_gaps(harmonic.timestamps, harmonic.values))]
    try:
        s = window_samples(*filled, steps, stride)
        n = len(s)
        assert s.report.candidates == (120 - steps) // stride + 1
    except DataError:
        n = 0
    assert n == expect


def test_windows_touching_long_gap_are_dropped():
    present = np.ones(48, bool)
    present[20:26] = False
    s = window_samples(*make_series(present), 6, 6)
    assert s.report.candidates == 8 and s.report.kept == 6 and s.report.dropped == 2


# --- split and standardizer -----------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12), st.integers(20, 180))
def test_no_temporal_leakage(seed, steps, stride, cut):
    rng = np.random.default_rng(seed)
    present = rng.random(240) > 0.03
    grid, gauge, harmonic = make_series(present, h=1, w=1, seed=seed)
    try:
        s = window_samples(grid, gauge, harmonic, steps, stride)
        train, val, test = chronological_split(s, SplitSpec(T0 + cut * HOUR))
    except (DataError, ConfigError):
        return
    hrs = [set(hours_since_epoch(p.hourly_index()).ravel().tolist()) for p in (train, val, test)]
    assert not (hrs[0] & hrs[1]) and not (hrs[0] & hrs[2]) and not (hrs[1] & hrs[2])
    assert max(hrs[0]) < min(hrs[1]) and max(hrs[1]) < min(hrs[2])
    assert train.ends.max() < T0 + cut * HOUR <= val.starts.min()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_standardizer_depends_on_train_only(seed):
    rng = np.random.default_rng(seed)
    s = window_samples(*make_series(np.ones(200, bool), seed=seed), 5, 5)
    train, val, test = chronological_split(s, SplitSpec(T0 + 100 * HOUR))
    (_, _, _), std = standardize_fit_apply(train, val, test)
    noisy_val = val.subset(np.arange(len(val)))
    noisy_val.atmos = noisy_val.atmos * 100 + rng.standard_normal(noisy_val.atmos.shape).astype(np.float32)
    (_, _), std2 = standardize_fit_apply(train, noisy_val)
    assert std == std2
    np.testing.assert_allclose(std.atmos_mean, train.atmos.mean(axis=(0, 1, 2, 3), dtype=np.float64))
    assert std.level_mean == pytest.approx(train.target.mean())
    assert std.level_std == pytest.approx(train.target.std())


def test_standardizer_roundtrip_and_zero_variance():
    std = Standardizer(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 4.0]), 0.5, 0.25)
    assert Standardizer.from_dict(json.loads(json.dumps(std.to_dict()))) == std
    z = std.level(np.array([0.75]))
    np.testing.assert_allclose(std.invert_level(z), [0.75])
    with pytest.raises(ConfigError):
        Standardizer.fit(np.ones((4, 2, 3)), np.arange(8.0))


def test_split_errors():
    s = window_samples(*make_series(np.ones(100, bool)), 5, 5)
    with pytest.raises(ConfigError):
        chronological_split(s, SplitSpec(T0))
    with pytest.raises(ConfigError):
        chronological_split(s, SplitSpec(T0 + 1000 * HOUR))


# --- on-disk formats ----------------------------------------------------------

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.just(15), st.just(15), st.just(3)), elements=finite32),
       st.booleans())
def test_grid_roundtrip_bit_exact(tmp_path_factory, data, gappy):
    ts = T0 + np.arange(data.shape[0]) * HOUR
    if gappy and data.shape[0] > 1:
        ts = ts + np.concatenate([[0], np.full(data.shape[0] - 1, 5)]) * HOUR
    path = tmp_path_factory.mktemp("g") / "grid.sgrid"
    write_grid_series(path, GridSeries(ts, data))
    back = load_grid_series(path)
    np.testing.assert_array_equal(back.timestamps, ts)
    assert back.grid.tobytes() == data.tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e9, 1e9, allow_nan=False)))
def test_series_csv_roundtrip_bit_exact(tmp_path_factory, values):
    ts = T0 + np.arange(values.size) * HOUR
    path = tmp_path_factory.mktemp("c") / "gauge.csv"
    write_series_csv(path, GaugeSeries(ts, values))
    back = read_series_csv(path)
    np.testing.assert_array_equal(back.timestamps, ts)
    assert back.values.tobytes() == values.tobytes()


def _grid_file(tmp_path, hw=(15, 15), n=3):
    path = tmp_path / "g.sgrid"
    write_grid_series(path, GridSeries(T0 + np.arange(n) * HOUR, np.zeros((n, *hw, 3), np.float32)))
    return path


def test_grid_shape_mismatch_is_reported(tmp_path):
    with pytest.raises(IngestionError, match="grid is 14x15, expected 15x15"):
        load_grid_series(_grid_file(tmp_path, (14, 15)))


def test_grid_truncated_body_reports_offset(tmp_path):
    path = _grid_file(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(IngestionError) as err:
        load_grid_series(path)
    assert err.value.offset == raw.index(b"\n") + 1


def test_grid_bad_header(tmp_path):
    path = tmp_path / "x.sgrid"
    path.write_bytes(b'{"magic": "nope"}\n')
    with pytest.raises(IngestionError, match="byte offset 0"):
        load_grid_series(path)


def test_grid_non_monotone_timestamps(tmp_path):
    path = _grid_file(tmp_path)
    raw = path.read_bytes()
    end = raw.index(b"\n")
    header = json.loads(raw[:end])
    header["timestamps"] = ["2020-12-20T02:00:00Z", "2020-12-20T01:00:00Z", "2020-12-20T03:00:00Z"]
    path.write_bytes(json.dumps(header).encode() + raw[end:])
    with pytest.raises(IngestionError, match="not strictly increasing"):
        load_grid_series(path)


def test_grid_nan_frame_offset(tmp_path):
    path = tmp_path / "n.sgrid"
    data = np.zeros((3, 15, 15, 3), np.float32)
    data[2, 0, 0, 0] = np.nan
    write_grid_series(path, GridSeries(T0 + np.arange(3) * HOUR, data))
    raw = path.read_bytes()
    with pytest.raises(IngestionError) as err:
        load_grid_series(path)
    assert err.value.offset == raw.index(b"\n") + 1 + 2 * 15 * 15 * 3 * 4


def test_csv_errors_carry_offsets(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("timestamp_iso8601,value_m\n2020-01-01T00:00:00Z,1.0\n2020-01-01T01:00:00Z,abc\n")
    with pytest.raises(IngestionError) as err:
        read_series_csv(path)
    assert err.value.offset == len("timestamp_iso8601,value_m\n2020-01-01T00:00:00Z,1.0\n")
    path.write_text("time,value\n")
    with pytest.raises(IngestionError, match="byte offset 0"):
        read_series_csv(path)
    path.write_text("timestamp_iso8601,value_m\n2020-01-01T01:00:00Z,1.0\n2020-01-01T00:00:00Z,1.0\n")
    with pytest.raises(IngestionError, match="increasing"):
        read_series_csv(path)


def test_csv_short_gap_filled_on_load(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("timestamp_iso8601,value_m\n2020-01-01T00:00:00Z,0.0\n2020-01-01T02:00:00Z,2.0\n")
    s = read_series_csv(path)
    np.testing.assert_array_equal(s.values, [0.0, 1.0, 2.0])


def test_series_validation():
    with pytest.raises(DataError):
        GaugeSeries(T0 + np.arange(3) * HOUR, [0.0, np.inf, 1.0])
    with pytest.raises(DataError):
        GaugeSeries(T0 + np.array([0, 0, 1]) * HOUR, [0.0, 1.0, 2.0])


# --- synthetic generator ---------------------------------------------------------

def test_synthetic_is_deterministic():
    a, b = generate_synthetic(11, 20, 12, 12), generate_synthetic(11, 20, 12, 12)
    assert a.grid.grid.tobytes() == b.grid.grid.tobytes()
    assert a.gauge.values.tobytes() == b.gauge.values.tobytes()
    assert generate_synthetic(12, 20, 12, 12).gauge.values.tobytes() != a.gauge.values.tobytes()


def test_synthetic_length_and_grid():
    ds = generate_synthetic(0, 10, 36, 24)
    assert len(ds.gauge) == 9 * 24 + 36
    assert ds.grid.grid.shape == (252, 15, 15, 3)
    assert format_time(ds.grid.timestamps[0]) == "2020-01-01T00:00:00Z"


def test_synthetic_tide_is_two_constituents():
    ds = generate_synthetic(1, 400, 24, 24)
    tide = ds.harmonic.values
    assert np.max(np.abs(tide)) <= 0.45 + 1e-12
    spec = np.abs(np.fft.rfft(tide))
    freqs = np.fft.rfftfreq(tide.size, d=1.0)
    top = freqs[np.argsort(spec)[-2:]]
    assert sorted(np.round(1 / top, 1)) == pytest.approx([12.4, 23.9], abs=0.2)


def test_synthetic_calm_atmosphere_has_no_surge():
    cfg = SyntheticConfig(**{**ZERO_FORCING.__dict__, "noise_m": 0.0})
    ds = generate_synthetic(2, 5, 24, 24, cfg=cfg)
    np.testing.assert_array_equal(ds.surge, np.zeros_like(ds.surge))
    np.testing.assert_array_equal(ds.gauge.values, ds.harmonic.values)
    assert np.all(ds.grid.grid[..., 2] == np.float32(P_REF))


def test_synthetic_noise_level():
    cfg = SyntheticConfig(**{**ZERO_FORCING.__dict__})
    ds = generate_synthetic(3, 300, 24, 24, cfg=cfg)
    resid = ds.gauge.values - ds.harmonic.values
    assert resid.std() == pytest.approx(0.01, rel=0.05)


def test_synthetic_storms_raise_surge():
    calm = SyntheticConfig(storms_per_day=0.0)
    stormy = SyntheticConfig(storms_per_day=0.5)
    a = generate_synthetic(4, 60, 24, 24, cfg=calm)
    b = generate_synthetic(4, 60, 24, 24, cfg=stormy)
    assert len(b.vortices) > 0
    assert np.abs(b.surge).max() > 2 * np.abs(a.surge).max()
