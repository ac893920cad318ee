import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtcausin import data as dio
from gtcausin.data import DataError, SpeedDataset
from gtcausin.layers import historic_speed

MONDAY = np.datetime64("2017-01-02T00:00:00", "s")
FIVE = np.timedelta64(300, "s")


def dataset(speeds, mask=None, start=MONDAY, step=FIVE, ids=None):
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.ndim == 1:
        speeds = speeds[:, None]
    mask = np.isfinite(speeds) if mask is None else mask
    ids = ids or [f"s{k}" for k in range(speeds.shape[1])]
    return SpeedDataset(start + step * np.arange(speeds.shape[0]), speeds, mask, ids)


# ---------------------------------------------------------------- CSV

def test_csv_round_trip_bit_exact(tmp_path):
    ds = dataset([[60.1, 1 / 3], [np.nan, 55.0], [62.25, 1e-7]])
    dio.save_speed_csv(tmp_path / "s.csv", ds)
    back = dio.load_speed_csv(tmp_path / "s.csv")
    assert back.speeds[back.observed_mask].tobytes() == ds.speeds[ds.observed_mask].tobytes()
    np.testing.assert_array_equal(back.observed_mask, ds.observed_mask)
    np.testing.assert_array_equal(back.timestamps, ds.timestamps)
    assert back.node_ids == ds.node_ids


def test_empty_cell_and_zero_are_missing(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a,b\n2017-01-02T00:00:00,,0\n2017-01-02T00:05:00,60,0.0\n")
    ds = dio.load_speed_csv(p)
    np.testing.assert_array_equal(ds.observed_mask, [[False, False], [True, False]])
    kept = dio.load_speed_csv(p, zero_is_missing=False)
    np.testing.assert_array_equal(kept.observed_mask, [[False, True], [True, True]])


@pytest.mark.parametrize("body", [
    "2017-01-02T00:05:00,1\n2017-01-02T00:00:00,2\n",     # shuffled
    "2017-01-02T00:00:00,1\n2017-01-02T00:00:00,2\n",     # duplicate
    "2017-01-02T00:00:00,1,2\n",                          # ragged
    "2017-01-02T00:00:00,abc\n",                          # bad value
    "yesterday,1\n",                                      # bad timestamp
])
def test_csv_rejects_malformed(tmp_path, body):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a\n" + body)
    with pytest.raises(DataError):
        dio.load_speed_csv(p)


# ---------------------------------------------------------------- aggregation

def test_aggregate_already_five_minute_unchanged():
    ds = dataset(np.arange(6.0))
    assert dio.aggregate_5min(ds) is ds


def test_aggregate_one_minute_mean():
    ds = dataset([50, 52, 54, 56, 58], step=np.timedelta64(60, "s"))
    out = dio.aggregate_5min(ds)
    assert out.num_steps == 1 and out.speeds[0, 0] == 54.0
    assert out.timestamps[0] == MONDAY


def test_aggregate_all_missing_window():
    vals = [np.nan] * 5 + [1, 2, 3, 4, 5]
    out = dio.aggregate_5min(dataset(vals, step=np.timedelta64(60, "s")))
    np.testing.assert_array_equal(out.observed_mask[:, 0], [False, True])
    assert out.speeds[1, 0] == 3.0


def test_aggregate_irregular_spacing_rejected():
    ts = MONDAY + np.array([0, 60, 180], dtype="timedelta64[s]")
    ds = SpeedDataset(ts, np.ones((3, 1)), np.ones((3, 1), bool), ["a"])
    with pytest.raises(DataError):
        dio.aggregate_5min(ds)


def test_aggregate_spacing_must_divide_five_minutes():
    with pytest.raises(DataError):
        dio.aggregate_5min(dataset([1.0, 2.0, 3.0], step=np.timedelta64(420, "s")))


# ---------------------------------------------------------------- interpolation

def test_interpolate_midpoint():
    out = dio.interpolate_training(dataset([60, np.nan, 70]))
    np.testing.assert_array_equal(out.speeds[:, 0], [60, 65, 70])
    np.testing.assert_array_equal(out.observed_mask[:, 0], [True, False, True])


def test_interpolate_leading_gap_nearest():
    out = dio.interpolate_training(dataset([np.nan, 60]))
    np.testing.assert_array_equal(out.speeds[:, 0], [60, 60])


def test_interpolate_three_wide_gap():
    out = dio.interpolate_training(dataset([60, np.nan, np.nan, np.nan, 72]))
    np.testing.assert_allclose(out.speeds[:, 0], [60, 63, 66, 69, 72], atol=1e-12)


def test_interpolate_rejects_empty_sensor(caplog):
    ds = dataset(np.array([[60, np.nan], [62, np.nan]]))
    out = dio.interpolate_training(ds)
    assert out.rejected_sensors == ("s1",)
    np.testing.assert_array_equal(out.speeds[:, 1], [61, 61])
    assert "no observations" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.floats(0.0, 0.8))
def test_interpolation_idempotent_and_preserves_observed(seed, t_len, miss):
    rng = np.random.default_rng(seed)
    speeds = rng.uniform(20, 70, size=(t_len, 3))
    mask = rng.random((t_len, 3)) >= miss
    mask[0] = True
    ds = dataset(np.where(mask, speeds, np.nan), mask)
    once = dio.interpolate_training(ds)
    twice = dio.interpolate_training(once)
    np.testing.assert_array_equal(once.speeds, twice.speeds)
    np.testing.assert_array_equal(once.speeds[mask], speeds[mask])
    assert np.all(np.isfinite(once.speeds))


# ---------------------------------------------------------------- split / normalize

def test_split_fractions():
    ds = dio.with_split(dataset(np.arange(100.0)))
    assert ds.split == (80, 90)
    assert ds.split_bounds("val") == (80, 90) and ds.split_bounds("test") == (90, 100)


def test_norm_stats_from_observed_training_values():
    vals = np.arange(100.0)
    vals[3] = np.nan
    ds = dio.with_split(dataset(vals))
    train = vals[:80][np.isfinite(vals[:80])]
    assert ds.norm_stats == (pytest.approx(train.mean(), abs=1e-12),
                             pytest.approx(train.std(), abs=1e-12))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(10, 200))
def test_renormalized_training_mean_is_zero(seed, t_len):
    rng = np.random.default_rng(seed)
    ds = dio.with_split(dataset(rng.normal(50, 8, size=(t_len, 2))))
    lo, hi = ds.split_bounds("train")
    assert abs(ds.normalize(ds.speeds[lo:hi]).mean()) < 1e-9


def test_zero_variance_training_uses_unit_std(caplog):
    ds = dio.with_split(dataset(np.full(30, 60.0)))
    assert ds.norm_stats == (60.0, 1.0)
    assert "zero variance" in caplog.text


def test_split_requires_observed_training_values():
    with pytest.raises(DataError):
        dio.with_split(dataset([np.nan] * 8 + [1.0, 2.0]))


# ---------------------------------------------------------------- windows

def test_split_of_24_steps_gives_one_window():
    ds = dio.with_split(dataset(np.arange(40.0)), split=(24, 32))
    assert len(list(dio.make_windows(ds, "train"))) == 1


def test_split_of_30_steps_gives_seven_windows():
    ds = dio.with_split(dataset(np.arange(40.0)), split=(30, 35))
    assert len(dio.window_set(ds, "train")) == 7


def test_short_split_warns_and_is_empty(caplog):
    ds = dio.with_split(dataset(np.arange(40.0)), split=(30, 35))
    assert list(dio.make_windows(ds, "val")) == []
    assert "no windows" in caplog.text


def test_window_contents_and_target_mask():
    vals = np.arange(60.0) + 10
    vals[30] = np.nan
    ds = dio.with_split(dataset(vals), split=(48, 54))
    items = list(dio.make_windows(ds, "train"))
    assert len(items) == 25
    x, y, cal, m = items[10]
    assert x.shape == (1, 1, 12) and y.shape == (1, 1, 12)
    np.testing.assert_allclose(ds.denormalize(x[0, 0]), vals[10:22])
    assert not m[0, 0, 30 - 22] and y[0, 0, 30 - 22] == 0.0
    assert cal.timestamps[0] == ds.timestamps[22]
    # inputs over the gap are interpolated
    x2 = items[25 - 6][0]
    assert np.all(np.isfinite(x2))


@settings(max_examples=30, deadline=None)
@given(st.integers(60, 200))
def test_no_window_crosses_a_split(t_len):
    ds = dio.with_split(dataset(np.arange(float(t_len))))
    for name in dio.SPLITS:
        lo, hi = ds.split_bounds(name)
        ws = dio.window_set(ds, name) if hi - lo >= 24 else None
        if ws is None or len(ws) == 0:
            continue
        assert ws.starts.min() >= lo and ws.starts.max() + 24 <= hi


# ---------------------------------------------------------------- historic speed

def days(n, per_day=4):
    """Dataset with ``per_day`` readings per day starting on a Monday."""
    step = np.timedelta64(86400 // per_day, "s")
    return step, MONDAY + step * np.arange(n * per_day)


def daily_dataset(values_per_day, per_day=4, mask=None):
    step, ts = days(len(values_per_day), per_day)
    speeds = np.repeat(np.asarray(values_per_day, float), per_day)[:, None]
    mask = np.isfinite(speeds) if mask is None else mask
    return SpeedDataset(ts, speeds, mask, ["a"])


def test_historic_constant():
    ds = daily_dataset([60.0] * 14)
    vals, flags = historic_speed(ds, 13 * 4 + 2)
    assert vals[0] == 60.0 and not flags[0]


def test_historic_five_weekdays():
    # Mon..Fri = 50..58, Sat/Sun = 99, next Monday queries the five prior weekdays
    ds = daily_dataset([50, 52, 54, 56, 58, 99, 99, 70])
    vals, _ = historic_speed(ds, 7 * 4 + 1)
    assert vals[0] == 54.0


def test_historic_one_missing_day():
    ds = daily_dataset([50, 52, np.nan, 56, 58, 99, 99, 70])
    vals, _ = historic_speed(ds, 7 * 4 + 1)
    assert vals[0] == pytest.approx((50 + 52 + 56 + 58) / 4)


def test_historic_weekend_uses_prior_weekend_days():
    ds = daily_dataset([1, 1, 1, 1, 1, 30, 40, 1, 1, 1, 1, 1, 80, 5])
    vals, _ = historic_speed(ds, 12 * 4)    # second Saturday: prior weekend days Sat, Sun
    assert vals[0] == 35.0
    vals, _ = historic_speed(ds, 13 * 4)    # second Sunday: Sat of the same weekend and prior Sun
    assert vals[0] == 60.0


def test_historic_fallback_flagged():
    ds = dio.with_split(daily_dataset([50, 52, 54, 56, 58, 60, 62, 64, 66, 68]))
    vals, flags = historic_speed(ds, 1)
    assert flags[0] and vals[0] == ds.norm_stats[0]


def test_weekday_and_month_conventions():
    ts = np.array(["2017-01-02", "2017-01-08", "2017-12-31"], dtype="datetime64[s]")
    np.testing.assert_array_equal(dio._weekday(ts), [0, 6, 6])
    np.testing.assert_array_equal(dio._month(ts), [0, 0, 11])


def test_dataset_manifest_fields():
    ds = dio.with_split(dataset(np.arange(50.0)))
    m = dio.manifest(ds, True)
    assert m["split"]["train_end"] == 40 and m["split"]["val_end"] == 45
    assert m["zero_is_missing"] is True and m["unit"] == "mph"
    assert m["norm_stats"]["mean"] == pytest.approx(19.5)
