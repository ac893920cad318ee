"""Sensor graph construction and neighbor transition matrices."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ORDER_DIRS = ("I1", "O1", "I2", "O2")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SensorGraph:
    """Directed weighted sensor graph; ``adjacency[i, j]`` weights edge i -> j."""

    adjacency: np.ndarray
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] == 0:
            raise GraphError(f"adjacency must be a non-empty square matrix, got {adj.shape}")
        if not np.all(np.isfinite(adj)) or adj.min() < 0:
            raise GraphError("adjacency entries must be finite and non-negative")
        ids = list(self.node_ids) if self.node_ids else [str(i) for i in range(adj.shape[0])]
        if len(ids) != adj.shape[0]:
            raise GraphError("node_ids length does not match adjacency")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "node_ids", ids)

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    def index(self, node_id: str) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise GraphError(f"unknown sensor id {node_id!r}") from None

    def permuted(self, perm: Sequence[int]) -> "SensorGraph":
        """Relabel nodes so that new node k is old node ``perm[k]``."""
        perm = np.asarray(perm)
        return SensorGraph(self.adjacency[np.ix_(perm, perm)],
                           [self.node_ids[p] for p in perm])


@dataclass(frozen=True)
class TransitionSet:
    w_i1: np.ndarray
    w_o1: np.ndarray
    w_i2: np.ndarray
    w_o2: np.ndarray
    t_i1: np.ndarray
    t_o1: np.ndarray
    t_i2: np.ndarray
    t_o2: np.ndarray
    d_i: np.ndarray
    d_o: np.ndarray

    def matrix(self, order_dir: str) -> np.ndarray:
        if order_dir not in ORDER_DIRS:
            raise GraphError(f"order_dir must be one of {ORDER_DIRS}, got {order_dir!r}")
        return getattr(self, "t_" + order_dir.lower())


def row_normalize(w: np.ndarray) -> np.ndarray:
    """``diag(w 1)^-1 w`` with zero-sum rows mapped to zero rows."""
    sums = w.sum(axis=1)
    inv = np.zeros_like(sums)
    nz = sums > 0
    inv[nz] = 1.0 / sums[nz]
    return w * inv[:, None]


def build_adjacency(distances: Iterable[tuple[str, str, float]], sigma: float, kappa: float,
                    node_ids: Sequence[str] | None = None) -> SensorGraph:
    """Gaussian-kernel adjacency ``exp(-d^2 / sigma^2)`` thresholded at ``d <= kappa``.

    Pairs absent from ``distances`` are treated as farther than ``kappa``.  When
    ``node_ids`` is omitted the node set is every id seen, in first-seen order.
    """
    if not sigma > 0 or not kappa > 0:
        raise GraphError("sigma and kappa must be positive")
    rows = [(str(a), str(b), float(d)) for a, b, d in distances]
    if node_ids is None:
        seen: dict[str, None] = {}
        for a, b, _ in rows:
            seen.setdefault(a)
            seen.setdefault(b)
        node_ids = list(seen)
    ids = [str(i) for i in node_ids]
    pos = {nid: k for k, nid in enumerate(ids)}
    if len(pos) != len(ids):
        raise GraphError("duplicate sensor ids")
    n = len(ids)
    adj = np.zeros((n, n))
    for a, b, d in rows:
        if a not in pos or b not in pos:
            raise GraphError(f"unknown sensor id in pair ({a!r}, {b!r})")
        if not np.isfinite(d) or d < 0:
            raise GraphError(f"invalid distance {d} for pair ({a!r}, {b!r})")
        if d <= kappa:
            adj[pos[a], pos[b]] = np.exp(-(d * d) / (sigma * sigma))
    np.fill_diagonal(adj, 1.0)
    return SensorGraph(adj, ids)


def read_distances(path: str | Path) -> list[tuple[str, str, float]]:
    """Read a ``from,to,cost`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "cost"]:
            raise GraphError(f"{path}: expected header 'from,to,cost', got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise GraphError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                cost = float(row[2])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: bad cost {row[2]!r}") from None
            out.append((row[0].strip(), row[1].strip(), cost))
    return out


def write_distances(path: str | Path, distances: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["from", "to", "cost"])
        for a, b, d in distances:
            writer.writerow([a, b, repr(float(d))])


def build_transitions(graph: SensorGraph) -> TransitionSet:
    adj = graph.adjacency
    w_o1 = adj.copy()
    # zero the diagonal rather than subtract I, so entries stay non-negative
    np.fill_diagonal(w_o1, 0.0)
    w_i1 = w_o1.T.copy()
    w_i2 = w_i1 @ w_i1
    np.fill_diagonal(w_i2, 0.0)
    w_o2 = w_o1 @ w_o1
    np.fill_diagonal(w_o2, 0.0)
    return TransitionSet(
        w_i1=w_i1, w_o1=w_o1, w_i2=w_i2, w_o2=w_o2,
        t_i1=row_normalize(w_i1), t_o1=row_normalize(w_o1),
        t_i2=row_normalize(w_i2), t_o2=row_normalize(w_o2),
        d_i=adj.sum(axis=0), d_o=adj.sum(axis=1),
    )


def aggregate(transitions: TransitionSet, order_dir: str, signal: np.ndarray) -> np.ndarray:
    """Neighbor-averaged signal ``T @ signal`` for one of I1/O1/I2/O2."""
    mat = transitions.matrix(order_dir)
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] != mat.shape[0]:
        raise GraphError(f"signal has {signal.shape[0]} rows, graph has {mat.shape[0]} nodes")
    return mat @ signal


def diffusion_supports(graph: SensorGraph) -> tuple[np.ndarray, np.ndarray]:
    """Forward ``D_O^-1 W`` and reverse ``D_I^-1 W^T`` random-walk matrices."""
    adj = graph.adjacency
    return row_normalize(adj), row_normalize(adj.T)
