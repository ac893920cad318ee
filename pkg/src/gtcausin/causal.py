"""Speed-variation causal variables, batch sampling, Pearson relations and file exchange.

Each sample is anchored at a (node, t) pair and holds, for six consecutive
time slices, the speed variation of the node and of its four aggregated
neighborhoods (first/second-order, in/out).  Samples are never built from
interpolated readings: any unobserved speed in the span rejects the sample.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SpeedDataset
from .graph import TransitionSet

log = logging.getLogger(__name__)

ROLES = ("X", "I1", "O1", "I2", "O2")
SLICES = 6
VARIABLE_NAMES: tuple[str, ...] = tuple(
    f"{r}(t)" if j == 0 else f"{r}(t+{j})" for j in range(SLICES) for r in ROLES)
NUM_VARIABLES = len(VARIABLE_NAMES)  # 30

# weights of X, I1, O1 in the neighborhood variation used for event detection
EVENT_WEIGHTS = (0.5, 0.25, 0.25)


class SampleRejected(ValueError):
    """A required speed reading is unobserved."""


class CausalInputError(ValueError):
    pass


# ---------------------------------------------------------------- variables

def speed_variation(series) -> np.ndarray:
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] < 2:
        raise CausalInputError("speed_variation needs a series of length >= 2")
    return np.diff(s)


@dataclass(frozen=True)
class CausalVariableBatch:
    rows: np.ndarray
    source: str = "random"
    variable_names: tuple[str, ...] = VARIABLE_NAMES
    anchors: np.ndarray | None = None   # (S, 2) node, t

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, NUM_VARIABLES) \
            if np.asarray(self.rows).size == 0 else np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != NUM_VARIABLES:
            raise CausalInputError(f"batch must have {NUM_VARIABLES} columns, got {rows.shape}")
        if tuple(self.variable_names) != VARIABLE_NAMES:
            raise CausalInputError("variable names must follow the canonical order")
        if not np.all(np.isfinite(rows)):
            raise CausalInputError("batch contains non-finite entries")
        if self.source not in ("random", "event"):
            raise CausalInputError(f"unknown source {self.source!r}")
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return self.rows.shape[0]


@dataclass
class _VariationTable:
    """Per-step role variations and the validity of each (t, node) anchor."""

    values: np.ndarray   # (T-1, N, 5)
    valid: np.ndarray    # (T-SLICES, N) bool: anchor usable


def _neighborhood(transitions: TransitionSet) -> np.ndarray:
    n = transitions.w_i1.shape[0]
    hood = np.eye(n, dtype=bool)
    for w in (transitions.w_i1, transitions.w_o1, transitions.w_i2, transitions.w_o2):
        hood |= w != 0
    return hood


def _variation_table(dataset: SpeedDataset, transitions: TransitionSet) -> _VariationTable:
    mask = np.asarray(dataset.observed_mask, dtype=bool)
    speeds = np.where(mask, np.asarray(dataset.speeds, dtype=np.float64), 0.0)
    t_len, n = speeds.shape
    if transitions.w_i1.shape[0] != n:
        raise CausalInputError("transition set and dataset disagree on node count")
    if t_len < SLICES + 1:
        return _VariationTable(np.zeros((max(t_len - 1, 0), n, 5)), np.zeros((0, n), bool))
    var = np.diff(speeds, axis=0)                                     # (T-1, N)
    mats = (transitions.t_i1, transitions.t_o1, transitions.t_i2, transitions.t_o2)
    values = np.stack([var] + [var @ m.T for m in mats], axis=-1)
    # anchor t needs readings t .. t+SLICES at the node and its <=2-hop neighborhood
    hood = _neighborhood(transitions).astype(np.int64)
    missing = (~mask).astype(np.int64) @ hood.T > 0                   # (T, N)
    csum = np.concatenate([np.zeros((1, n), np.int64), np.cumsum(missing, axis=0)])
    span = SLICES + 1
    valid = (csum[span:] - csum[:-span]) == 0                          # (T-SLICES, N)
    return _VariationTable(values, valid)


def _rows(table: _VariationTable, nodes: np.ndarray, ts: np.ndarray) -> np.ndarray:
    steps = ts[:, None] + np.arange(SLICES)[None, :]
    return table.values[steps, nodes[:, None], :].reshape(len(nodes), NUM_VARIABLES)


def extract_variables(dataset: SpeedDataset, transitions: TransitionSet, node: int,
                      t: int) -> np.ndarray:
    """The 30 causal variables anchored at ``(node, t)``; raises SampleRejected on gaps."""
    t_len, n = dataset.speeds.shape
    if not 0 <= node < n:
        raise IndexError(f"node {node} out of range")
    if not 0 <= t or t + SLICES >= t_len:
        raise SampleRejected(f"span {t}..{t + SLICES} exceeds the {t_len}-step dataset")
    table = _variation_table(dataset, transitions)
    if not table.valid[t, node]:
        raise SampleRejected(f"unobserved reading in the span of node {node} at t={t}")
    return _rows(table, np.array([node]), np.array([t]))[0]


# ---------------------------------------------------------------- events

@dataclass(frozen=True)
class Event:
    node: int
    t: int            # variation step: speeds t -> t+1
    magnitude: float


def neighborhood_variation(dataset: SpeedDataset, transitions: TransitionSet) -> np.ndarray:
    """(T-1, N) weighted mix of the X, I1 and O1 variations."""
    table = _variation_table(dataset, transitions)
    w = np.asarray(EVENT_WEIGHTS)
    return table.values[..., :3] @ w


def detect_events(dataset: SpeedDataset, transitions: TransitionSet, sigmas: float = 3.0,
                  sustain: int = 3, top: int | None = None) -> list[Event]:
    """Sudden, lasting shifts of the weighted neighborhood speed.

    A step ``t`` is an event when ``|u(t)|`` exceeds ``sigmas`` training-split
    standard deviations of ``u`` and the shifted level holds for ``sustain``
    steps (the cumulative change stays beyond the threshold with the same
    sign).  Anchors touching unobserved readings are skipped.  Sorted by
    ``|magnitude|`` descending, ties to earlier ``t`` then lower node.
    """
    mask = np.asarray(dataset.observed_mask, dtype=bool)
    u = neighborhood_variation(dataset, transitions)
    if u.shape[0] < sustain:
        return []
    lo, hi = dataset.split_bounds("train") if dataset.split else (0, dataset.num_steps)
    ref = u[lo:max(lo, hi - 1)]
    sd = float(ref.std()) if ref.size else 0.0
    if sd == 0.0:
        return []
    thr = sigmas * sd
    level = np.concatenate([np.zeros((1, u.shape[1])), np.cumsum(u, axis=0)])  # (T, N)
    hood = _neighborhood(transitions).astype(np.int64)
    bad = (~mask).astype(np.int64) @ hood.T > 0
    out = []
    for t in range(u.shape[0] - sustain + 1):
        cand = np.abs(u[t]) > thr
        if not cand.any():
            continue
        shift = level[t + 1:t + 1 + sustain] - level[t][None, :]             # (sustain, N)
        held = np.all(np.sign(shift) == np.sign(u[t])[None, :], axis=0) & \
            np.all(np.abs(shift) > thr, axis=0)
        clean = ~bad[t:t + sustain + 1].any(axis=0)
        for node in np.flatnonzero(cand & held & clean):
            out.append(Event(int(node), t, float(u[t, node])))
    out.sort(key=lambda e: (-abs(e.magnitude), e.t, e.node))
    return out[:top] if top is not None else out


# ---------------------------------------------------------------- sampling

def sample_batches(dataset: SpeedDataset, transitions: TransitionSet, batch_size: int = 2000,
                   repeats: int = 100, mode: str = "random", seed: int = 0,
                   events: Sequence[Event] | None = None, event_params: dict | None = None
                   ) -> list[CausalVariableBatch]:
    """Seeded batches of 30-variable samples.

    Random mode draws distinct valid anchors uniformly per batch; event mode
    draws from detected events whose 6-slice span starting at the event step
    is fully observed.  Too few anchors gives partial (or empty) batches with
    a warning.
    """
    if batch_size < 1 or repeats < 1:
        raise CausalInputError("batch_size and repeats must be positive")
    if mode not in ("random", "event"):
        raise CausalInputError(f"unknown mode {mode!r}")
    table = _variation_table(dataset, transitions)
    if mode == "random":
        ts, nodes = np.nonzero(table.valid)
    else:
        evs = events if events is not None else detect_events(dataset, transitions,
                                                              **(event_params or {}))
        pairs = [(e.t, e.node) for e in evs
                 if e.t < table.valid.shape[0] and table.valid[e.t, e.node]]
        pairs = sorted(set(pairs))
        ts = np.array([p[0] for p in pairs], dtype=np.int64)
        nodes = np.array([p[1] for p in pairs], dtype=np.int64)
    avail = len(ts)
    if avail == 0:
        log.warning("no valid %s anchors; returning empty batches", mode)
    elif avail < batch_size:
        log.warning("only %d valid %s anchors for batches of %d", avail, mode, batch_size)
    rng = np.random.default_rng(seed)
    take = min(batch_size, avail)
    out = []
    for _ in range(repeats):
        pick = np.sort(rng.choice(avail, size=take, replace=False)) if take else \
            np.zeros(0, np.int64)
        rows = _rows(table, nodes[pick], ts[pick]) if take else np.zeros((0, NUM_VARIABLES))
        out.append(CausalVariableBatch(rows, mode, anchors=np.stack([nodes[pick], ts[pick]], 1)))
    return out


# ---------------------------------------------------------------- correlation

@dataclass
class RelationMatrix:
    c: np.ndarray
    kind: str = "pearson"
    repeats: int = 1
    c_sum: np.ndarray | None = None       # sum of per-batch matrices
    flagged: tuple[int, ...] = field(default=())   # zero-variance columns

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.c.shape != (NUM_VARIABLES, NUM_VARIABLES):
            raise CausalInputError(f"relation matrix must be 30x30, got {self.c.shape}")
        if self.kind not in ("pearson", "external_icd"):
            raise CausalInputError(f"unknown kind {self.kind!r}")
        if not np.all(np.isfinite(self.c)):
            raise CausalInputError("relation matrix contains non-finite entries")
        if self.kind == "pearson":
            if np.abs(self.c - self.c.T).max() > 1e-9 or np.abs(np.diag(self.c) - 1).max() > 1e-9:
                raise CausalInputError("pearson matrix must be symmetric with unit diagonal")

    @property
    def c_mean(self) -> np.ndarray:
        return self.c if self.c_sum is None else self.c_sum / self.repeats


def _pearson(rows: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    x = rows - rows.mean(axis=0)
    ss = np.sqrt((x * x).sum(axis=0))
    zero = ss == 0
    safe = np.where(zero, 1.0, ss)
    c = (x.T @ x) / np.outer(safe, safe)
    c[zero, :] = 0.0
    c[:, zero] = 0.0
    np.clip(c, -1.0, 1.0, out=c)
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    return c, tuple(int(i) for i in np.flatnonzero(zero))


def pearson_matrix(batches: Sequence[CausalVariableBatch]) -> RelationMatrix:
    """Pooled Pearson matrix over every row; also keeps the sum of per-batch matrices."""
    full = [b.rows for b in batches if len(b)]
    if not full or sum(len(r) for r in full) < 2:
        raise CausalInputError("pearson_matrix needs at least 2 rows")
    pooled, flagged = _pearson(np.concatenate(full))
    if flagged:
        log.warning("zero-variance columns %s set to 0 correlation",
                    [VARIABLE_NAMES[i] for i in flagged])
    per = [_pearson(r)[0] for r in full if len(r) >= 2]
    c_sum = np.sum(per, axis=0) if per else None
    return RelationMatrix(pooled, "pearson", len(per) or 1, c_sum, flagged)


@dataclass
class LinkReport:
    triangle_mean: float          # same-timestamp X-I1, X-O1, I1-O1, averaged over slices
    second_order_mean: float      # same-timestamp X-I2, X-O2
    self_lag: dict[int, float]    # lag -> mean |r(V(t), V(t+lag))| over the five roles
    role_lag: dict[str, dict[int, float]]

    @property
    def triangle_gap(self) -> float:
        return self.triangle_mean - self.second_order_mean

    def to_dict(self) -> dict:
        return {"triangle_mean": self.triangle_mean, "second_order_mean": self.second_order_mean,
                "triangle_gap": self.triangle_gap,
                "self_lag": {str(k): v for k, v in self.self_lag.items()},
                "role_lag": {r: {str(k): v for k, v in d.items()} for r, d in self.role_lag.items()}}


def _col(role: str, j: int) -> int:
    return j * len(ROLES) + ROLES.index(role)


def neighbor_link_report(rel: RelationMatrix | np.ndarray) -> LinkReport:
    c = np.abs(rel.c if isinstance(rel, RelationMatrix) else np.asarray(rel, float))
    if c.shape != (NUM_VARIABLES, NUM_VARIABLES):
        raise CausalInputError("link report needs a 30x30 matrix")
    tri = [c[_col(a, j), _col(b, j)] for j in range(SLICES)
           for a, b in (("X", "I1"), ("X", "O1"), ("I1", "O1"))]
    sec = [c[_col("X", j), _col(b, j)] for j in range(SLICES) for b in ("I2", "O2")]
    role_lag = {r: {lag: float(np.mean([c[_col(r, j), _col(r, j + lag)]
                                        for j in range(SLICES - lag)]))
                    for lag in range(1, SLICES)} for r in ROLES}
    self_lag = {lag: float(np.mean([role_lag[r][lag] for r in ROLES])) for lag in range(1, SLICES)}
    return LinkReport(float(np.mean(tri)), float(np.mean(sec)), self_lag, role_lag)


@dataclass
class DistributionSummary:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "edges": self.edges.tolist(), "mean": self.mean,
                "std": self.std, "skewness": self.skewness,
                "excess_kurtosis": self.excess_kurtosis}


def distribution_summary(values, bins: int = 50) -> DistributionSummary:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise CausalInputError("distribution_summary needs at least 2 values")
    mean = float(v.mean())
    d = v - mean
    m2 = float((d ** 2).mean())
    std = m2 ** 0.5
    if m2 == 0.0:
        return DistributionSummary(np.array([v.size]), np.array([v[0], v[0]]), mean, 0.0, 0.0, 0.0)
    skew = float((d ** 3).mean() / m2 ** 1.5)
    kurt = float((d ** 4).mean() / m2 ** 2 - 3.0)
    counts, edges = np.histogram(v, bins=bins)
    return DistributionSummary(counts, edges, mean, std, skew, kurt)


# ---------------------------------------------------------------- file exchange

def _fmt(x: float) -> str:
    return repr(float(x))


def export_batches(batches: Sequence[CausalVariableBatch], directory: str | Path) -> list[Path]:
    """One CSV per batch (``batch_000.csv`` ...) with the 30 named columns."""
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, b in enumerate(batches):
        p = out_dir / f"batch_{i:03d}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(VARIABLE_NAMES)
            w.writerows([_fmt(x) for x in row] for row in b.rows)
        paths.append(p)
    return paths


def _read_named_csv(path: Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CausalInputError(f"{path}: empty file")
    if tuple(h.strip() for h in rows[0]) != VARIABLE_NAMES:
        raise CausalInputError(f"{path}: header must list the 30 variables in canonical order")
    body = [r for r in rows[1:] if r]
    if any(len(r) != NUM_VARIABLES for r in body):
        raise CausalInputError(f"{path}: every row needs {NUM_VARIABLES} values")
    try:
        return np.array([[float(x) for x in r] for r in body]).reshape(-1, NUM_VARIABLES)
    except ValueError as exc:
        raise CausalInputError(f"{path}: {exc}") from None


def read_batches(paths: Sequence[str | Path], source: str = "random") -> list[CausalVariableBatch]:
    return [CausalVariableBatch(_read_named_csv(Path(p)), source) for p in paths]


def export_relation(rel: RelationMatrix, path: str | Path, matrix: np.ndarray | None = None):
    """Write ``rel.c`` (or an explicit ``matrix`` such as ``rel.c_mean``) as a named 30x30 CSV."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VARIABLE_NAMES)
        w.writerows([_fmt(x) for x in row] for row in (rel.c if matrix is None else matrix))


def import_relation(path: str | Path, kind: str = "external_icd") -> RelationMatrix:
    c = _read_named_csv(Path(path))
    if c.shape != (NUM_VARIABLES, NUM_VARIABLES):
        raise CausalInputError(f"{path}: expected a 30x30 matrix, got {c.shape}")
    return RelationMatrix(c, kind)
