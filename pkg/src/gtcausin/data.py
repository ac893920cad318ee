"""Speed matrices: CSV I/O, 5-minute aggregation, gap filling, splits and windows."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

FIVE_MIN = np.timedelta64(5, "m")
SPLITS = ("train", "val", "test")
TRAIN_FRAC, VAL_FRAC = 0.8, 0.1
WEEKDAY_LOOKBACK, WEEKEND_LOOKBACK = 5, 2


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SpeedDataset:
    """Timestamped T x N speed matrix.

    ``speeds`` holds NaN wherever ``observed_mask`` is false, except in a
    gap-filled training view (see ``interpolate_training``) where the mask is
    kept but the gaps carry interpolated values.
    """

    timestamps: np.ndarray           # datetime64[s], shape (T,)
    speeds: np.ndarray               # (T, N)
    observed_mask: np.ndarray        # (T, N) bool
    node_ids: list[str]
    unit: str = "mph"
    norm_stats: tuple[float, float] | None = None
    split: tuple[int, int] | None = None
    filled: bool = False
    rejected_sensors: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        sp = np.asarray(self.speeds, dtype=np.float64)
        mask = np.asarray(self.observed_mask, dtype=bool)
        if sp.ndim != 2 or sp.shape != mask.shape or sp.shape[0] != ts.shape[0]:
            raise DataError("timestamps, speeds and mask shapes disagree")
        if len(self.node_ids) != sp.shape[1]:
            raise DataError("node_ids length does not match speed columns")
        if ts.size > 1 and np.any(np.diff(ts) <= np.timedelta64(0, "s")):
            raise DataError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "speeds", sp)
        object.__setattr__(self, "observed_mask", mask)
        object.__setattr__(self, "node_ids", [str(n) for n in self.node_ids])

    @property
    def num_steps(self) -> int:
        return self.speeds.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.speeds.shape[1]

    def split_bounds(self, name: str) -> tuple[int, int]:
        if self.split is None:
            raise DataError("dataset has no split; call with_split() first")
        train_end, val_end = self.split
        bounds = {"train": (0, train_end), "val": (train_end, val_end),
                  "test": (val_end, self.num_steps)}
        if name not in bounds:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return bounds[name]

    def normalize(self, values: np.ndarray) -> np.ndarray:
        mean, std = self._stats()
        return (values - mean) / std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        mean, std = self._stats()
        return values * std + mean

    def _stats(self):
        if self.norm_stats is None:
            raise DataError("dataset has no normalization stats; call with_split() first")
        return self.norm_stats

    def spacing(self) -> np.timedelta64:
        if self.num_steps < 2:
            raise DataError("need at least two timestamps to infer spacing")
        steps = np.unique(np.diff(self.timestamps))
        if steps.size != 1:
            raise DataError("irregular timestamp spacing")
        return steps[0]


# ---------------------------------------------------------------- CSV I/O

def load_speed_csv(path: str | Path, zero_is_missing: bool = True, unit: str = "mph") -> SpeedDataset:
    """Read ``timestamp,<sensor>...`` rows.  Empty cells (and 0 when ``zero_is_missing``) are missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: header must be a timestamp column plus sensor columns")
        ids = [h.strip() for h in header[1:]]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate sensor columns")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                stamps.append(np.datetime64(datetime.fromisoformat(row[0].strip()), "s"))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    vals.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad value {cell!r}") from None
                vals.append(math.nan if (zero_is_missing and v == 0.0) or not math.isfinite(v) else v)
            rows.append(vals)
    ts = np.array(stamps, dtype="datetime64[s]")
    if ts.size > 1:
        d = np.diff(ts)
        if np.any(d == np.timedelta64(0, "s")):
            raise DataError(f"{path}: duplicate timestamps")
        if np.any(d < np.timedelta64(0, "s")):
            raise DataError(f"{path}: timestamps are not increasing")
    speeds = np.array(rows, dtype=np.float64).reshape(len(rows), len(ids))
    return SpeedDataset(ts, speeds, ~np.isnan(speeds), ids, unit=unit)


def save_speed_csv(path: str | Path, dataset: SpeedDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *dataset.node_ids])
        for ts, vals, obs in zip(dataset.timestamps, dataset.speeds, dataset.observed_mask):
            stamp = ts.astype(datetime).isoformat()
            writer.writerow([stamp, *[repr(float(v)) if o else "" for v, o in zip(vals, obs)]])


# ---------------------------------------------------------------- aggregation and gaps

def aggregate_5min(dataset: SpeedDataset) -> SpeedDataset:
    """Average observed readings into 5-minute windows aligned to clock multiples of 5 minutes."""
    if dataset.num_steps < 2:
        return dataset
    step = dataset.spacing()
    if FIVE_MIN % step != np.timedelta64(0, "s"):
        raise DataError(f"raw spacing {step} does not divide 5 minutes")
    if step == FIVE_MIN and np.all(dataset.timestamps.astype("int64") % 300 == 0):
        return dataset
    secs = dataset.timestamps.astype("int64")
    bins = secs // 300
    first, last = bins[0], bins[-1]
    nb = int(last - first + 1)
    idx = bins - first
    vals = np.where(dataset.observed_mask, dataset.speeds, 0.0)
    sums = np.zeros((nb, dataset.num_nodes))
    counts = np.zeros((nb, dataset.num_nodes))
    np.add.at(sums, idx, vals)
    np.add.at(counts, idx, dataset.observed_mask.astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    ts = ((np.arange(nb) + first) * 300).astype("datetime64[s]")
    return SpeedDataset(ts, mean, counts > 0, dataset.node_ids, unit=dataset.unit)


def _fill_column(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    pos = np.flatnonzero(observed)
    # np.interp clamps to the end values, which is nearest-fill outside the observed span
    return np.interp(np.arange(values.size), pos, values[pos])


def interpolate_training(dataset: SpeedDataset) -> SpeedDataset:
    """Linearly fill gaps per sensor; the observed mask is carried unchanged.

    A sensor with no observations at all is filled with the global observed
    mean and listed in ``rejected_sensors``.
    """
    out = dataset.speeds.copy()
    rejected = list(dataset.rejected_sensors)
    obs_vals = dataset.speeds[dataset.observed_mask]
    fallback = float(obs_vals.mean()) if obs_vals.size else 0.0
    for j in range(dataset.num_nodes):
        col_obs = dataset.observed_mask[:, j]
        if not col_obs.any():
            log.warning("sensor %s has no observations; filling with %.3f",
                        dataset.node_ids[j], fallback)
            out[:, j] = fallback
            if dataset.node_ids[j] not in rejected:
                rejected.append(dataset.node_ids[j])
            continue
        out[:, j] = _fill_column(dataset.speeds[:, j], col_obs)
    return replace(dataset, speeds=out, filled=True, rejected_sensors=tuple(rejected))


# ---------------------------------------------------------------- split and normalization

def split_indices(num_steps: int) -> tuple[int, int]:
    """Chronological ``train | val | test`` boundaries at 80% / 90%."""
    return int(round(TRAIN_FRAC * num_steps)), int(round((TRAIN_FRAC + VAL_FRAC) * num_steps))


def with_split(dataset: SpeedDataset, split: tuple[int, int] | None = None) -> SpeedDataset:
    """Attach split boundaries and training-split normalization stats."""
    train_end, val_end = split if split is not None else split_indices(dataset.num_steps)
    if not 0 < train_end <= val_end <= dataset.num_steps:
        raise DataError(f"invalid split boundaries {(train_end, val_end)}")
    train_mask = dataset.observed_mask[:train_end]
    vals = dataset.speeds[:train_end][train_mask]
    if vals.size == 0:
        raise DataError("training split has no observed values")
    mean = float(vals.mean())
    std = float(vals.std())
    if std == 0.0:
        log.warning("training split has zero variance; using std = 1")
        std = 1.0
    return replace(dataset, norm_stats=(mean, std), split=(int(train_end), int(val_end)))


# ---------------------------------------------------------------- calendar features

def steps_per_day(dataset: SpeedDataset) -> int:
    step = dataset.spacing().astype("timedelta64[s]").astype(np.int64)
    if 86400 % step:
        raise DataError("sampling interval does not divide a day")
    return int(86400 // step)


def _weekday(ts: np.ndarray) -> np.ndarray:
    days = ts.astype("datetime64[D]").astype(np.int64)
    return (days + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0


def _month(ts: np.ndarray) -> np.ndarray:
    return ts.astype("datetime64[M]").astype(np.int64) % 12


def historic_speed_table(dataset: SpeedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Historic same-time-of-day averages for every timestamp.

    Weekdays average the 5 most recent prior weekdays, weekend days the 2 most
    recent prior weekend days; unobserved readings are skipped.  Where no
    prior day contributes, the training mean is used and flagged.  Returns
    ``(values (T, N), fallback (T, N) bool)``.
    """
    spd = steps_per_day(dataset)
    t_len = dataset.num_steps
    wd = _weekday(dataset.timestamps)
    weekend = wd >= 5
    need = np.where(weekend, WEEKEND_LOOKBACK, WEEKDAY_LOOKBACK)
    taken = np.zeros(t_len, dtype=np.int64)
    sums = np.zeros(dataset.speeds.shape)
    counts = np.zeros(dataset.speeds.shape)
    raw = np.where(dataset.observed_mask, dataset.speeds, 0.0)
    obs = dataset.observed_mask.astype(np.float64)
    for back in range(1, t_len // spd + 1):
        if not np.any(taken < need):
            break
        src = np.arange(t_len) - back * spd
        ok = (src >= 0) & (taken < need)
        ok[ok] &= weekend[src[ok]] == weekend[ok]
        if not ok.any():
            continue
        rows = np.flatnonzero(ok)
        sums[rows] += raw[src[rows]]
        counts[rows] += obs[src[rows]]
        taken[rows] += 1
    fallback = counts == 0
    if dataset.norm_stats is not None:
        default = dataset.norm_stats[0]
    else:
        vals = dataset.speeds[dataset.observed_mask]
        default = float(vals.mean()) if vals.size else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(fallback, default, sums / np.maximum(counts, 1))
    return table, fallback


def historic_speed(dataset: SpeedDataset, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Historic speed at timestamp index ``t``: ``(values (N,), fallback flags (N,))``."""
    if not 0 <= t < dataset.num_steps:
        raise IndexError(f"timestamp index {t} out of range")
    table, flags = historic_speed_table(dataset)
    return table[t], flags[t]


@dataclass
class Calendar:
    """Per-window calendar metadata, keyed to the first forecast timestamp."""

    day_of_week: np.ndarray  # (B,) Monday = 0
    month: np.ndarray        # (B,) January = 0
    historic: np.ndarray     # (B, N) speed units
    timestamps: np.ndarray   # (B,) datetime64

    def __len__(self):
        return len(self.day_of_week)

    def take(self, idx) -> "Calendar":
        return Calendar(self.day_of_week[idx], self.month[idx], self.historic[idx],
                        self.timestamps[idx])


def calendar_at(dataset: SpeedDataset, rows: np.ndarray,
                table: np.ndarray | None = None) -> Calendar:
    rows = np.asarray(rows, dtype=np.int64)
    if table is None:
        table = historic_speed_table(dataset)[0]
    ts = dataset.timestamps[rows]
    return Calendar(_weekday(ts), _month(ts), table[rows], ts)


# ---------------------------------------------------------------- supervised windows

@dataclass
class WindowSet:
    """Stacked supervised windows for one split."""

    inputs: np.ndarray       # (B, N, T_in) normalized, gap-filled
    targets: np.ndarray      # (B, N, T_out) raw speeds, 0 where missing
    target_mask: np.ndarray  # (B, N, T_out) bool
    calendar: Calendar
    starts: np.ndarray       # (B,) index of the first input step

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.target_mask[idx],
                         self.calendar.take(idx), self.starts[idx])


def window_set(dataset: SpeedDataset, split: str, input_len: int = 12,
               output_len: int = 12) -> WindowSet:
    """All stride-1 windows whose input and target both lie inside ``split``."""
    lo, hi = dataset.split_bounds(split)
    span = input_len + output_len
    n_win = max(0, hi - lo - span + 1)
    if n_win == 0:
        log.warning("split %s has %d steps, fewer than %d; no windows", split, hi - lo, span)
    filled = dataset if dataset.filled else interpolate_training(dataset)
    norm = dataset.normalize(filled.speeds)
    raw = np.where(dataset.observed_mask, dataset.speeds, 0.0)
    starts = lo + np.arange(n_win)
    in_idx = starts[:, None] + np.arange(input_len)[None, :]
    out_idx = starts[:, None] + input_len + np.arange(output_len)[None, :]
    inputs = norm[in_idx].transpose(0, 2, 1)
    targets = raw[out_idx].transpose(0, 2, 1)
    tmask = dataset.observed_mask[out_idx].transpose(0, 2, 1)
    cal = calendar_at(dataset, starts + input_len)
    return WindowSet(inputs, targets, tmask, cal, starts)


def make_windows(dataset: SpeedDataset, split: str, input_len: int = 12,
                 output_len: int = 12) -> Iterator[tuple[np.ndarray, np.ndarray, Calendar, np.ndarray]]:
    """Yield ``(input (N, 1, T_in), target (N, 1, T_out), calendar, target_mask)`` per window."""
    ws = window_set(dataset, split, input_len, output_len)
    for b in range(len(ws)):
        yield (ws.inputs[b][:, None, :], ws.targets[b][:, None, :],
               ws.calendar.take(slice(b, b + 1)), ws.target_mask[b][:, None, :])


def manifest(dataset: SpeedDataset, zero_is_missing: bool) -> dict:
    """Dataset manifest: units, missing encoding, split indices, norm stats."""
    mean, std = dataset.norm_stats if dataset.norm_stats else (None, None)
    train_end, val_end = dataset.split if dataset.split else (None, None)
    return {
        "unit": dataset.unit,
        "zero_is_missing": zero_is_missing,
        "num_steps": dataset.num_steps,
        "num_nodes": dataset.num_nodes,
        "node_ids": dataset.node_ids,
        "start": str(dataset.timestamps[0]) if dataset.num_steps else None,
        "split": {"train_end": train_end, "val_end": val_end, "order": list(SPLITS)},
        "norm_stats": {"mean": mean, "std": std},
        "missing_fraction": float(1.0 - dataset.observed_mask.mean()) if dataset.speeds.size else 0.0,
        "rejected_sensors": list(dataset.rejected_sensors),
    }
