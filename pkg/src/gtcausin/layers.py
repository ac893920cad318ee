"""Component layers: causal insight, graph diffusion, TCN, merge, inherent features.

Layer inputs follow the (batch..., node, channel, time) layout; the causal
insight layer works on flattened per-node feature rows (batch..., node, F).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .data import historic_speed  # noqa: F401  (re-exported as part of the layer API)
from .graph import SensorGraph, TransitionSet, diffusion_supports
from .numcore import ParamStore, ShapeError, Tensor

PERSPECTIVES = ("X", "I1", "O1")
BAD_PERSPECTIVES = ("X0", "X1", "X2")


# ---------------------------------------------------------------- causal insight

@dataclass
class CausalInsightParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    w_x: Tensor
    w_i: Tensor
    w_o: Tensor

    NAMES = ("w_q", "w_k", "w_v", "w_out", "w_x", "w_i", "w_o")

    @classmethod
    def create(cls, store: ParamStore, prefix: str, dim: int, rng: np.random.Generator):
        return cls(**{n: store.init_uniform(f"{prefix}/{n}", (dim, dim), dim, rng)
                      for n in cls.NAMES})

    @classmethod
    def from_arrays(cls, **arrays):
        return cls(**{n: Tensor(np.asarray(arrays[n], dtype=np.float64), requires_grad=True)
                      for n in cls.NAMES})

    @property
    def dim(self) -> int:
        return self.w_q.data.shape[0]


def _insight_core(params: CausalInsightParams, x: Tensor, transitions: TransitionSet | None,
                  bad: bool, residual: bool):
    n, f = x.data.shape[-2:]
    if f != params.dim:
        raise ShapeError(f"causal insight expects feature width {params.dim}, got {f}")
    if bad:
        tokens = nc.concat([x, x, x], axis=-2)
    else:
        if transitions is None or transitions.t_i1.shape[0] != n:
            raise ShapeError("transitions do not match the node count")
        mats = np.stack([transitions.t_i1, transitions.t_o1])
        neigh = nc.node_mix(mats, x)  # (..., 2, N, F)
        tokens = nc.concat([x, neigh[..., 0, :, :], neigh[..., 1, :, :]], axis=-2)
    q = tokens @ params.w_q
    k = tokens @ params.w_k
    v = tokens @ params.w_v
    scores = nc.scale(q @ nc.swap_last(k), 1.0 / math.sqrt(f))
    weights = nc.softmax_rows(scores)
    mixed = (weights @ v) @ params.w_out
    if residual:
        mixed = mixed + tokens
    x_p = mixed[..., :n, :]
    i_p = mixed[..., n:2 * n, :]
    o_p = mixed[..., 2 * n:, :]
    out = x_p @ params.w_x + i_p @ params.w_i + o_p @ params.w_o
    return out, scores, weights


def causal_insight_forward(params: CausalInsightParams, x, transitions: TransitionSet,
                           residual: bool = False) -> Tensor:
    """Attention over node, in-neighbor and out-neighbor tokens, then per-perspective mixing.

    ``x`` is (..., N, F).  Tokens are per node and per perspective, so the
    attention runs over 3N rows.  With ``residual`` the token stream is added
    back to the attention output before the split.
    """
    return _insight_core(params, nc.as_tensor(x), transitions, False, residual)[0]


def bad_causal_insight_forward(params: CausalInsightParams, x, residual: bool = False) -> Tensor:
    """Ablation wiring: the three token streams are all the node signal itself."""
    return _insight_core(params, nc.as_tensor(x), None, True, residual)[0]


@dataclass
class AttentionScores:
    station: int
    row_labels: list[str]
    column_labels: list[str]
    scores: np.ndarray   # (3, 3N) pre-softmax
    weights: np.ndarray  # (3, 3N) post-softmax

    def rows(self):
        """Long-format records ``(query, token_label, score, weight)``."""
        for r, q in enumerate(self.row_labels):
            for c, lab in enumerate(self.column_labels):
                yield q, lab, float(self.scores[r, c]), float(self.weights[r, c])


def token_labels(n: int, bad: bool = False) -> list[str]:
    persp = BAD_PERSPECTIVES if bad else PERSPECTIVES
    return [f"{p}[{i}]" for p in persp for i in range(n)]


def extract_attention_scores(params: CausalInsightParams, x, transitions: TransitionSet | None,
                             station: int, bad: bool = False, residual: bool = False
                             ) -> AttentionScores:
    x = nc.as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("attention extraction takes a single (N, F) input")
    n = x.data.shape[0]
    if not 0 <= station < n:
        raise IndexError(f"station {station} out of range for {n} nodes")
    _, scores, weights = _insight_core(params, x, transitions, bad, residual)
    rows = [station, n + station, 2 * n + station]
    labels = token_labels(n, bad)
    return AttentionScores(station, [labels[r] for r in rows], labels,
                           scores.data[rows].copy(), weights.data[rows].copy())


# ---------------------------------------------------------------- graph diffusion

@dataclass
class DiffusionParams:
    theta: Tensor  # (Q, P, K, 2)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, p: int, q: int, k: int,
               rng: np.random.Generator):
        if k < 1:
            raise ValueError("diffusion steps K must be >= 1")
        return cls(store.init_uniform(f"{prefix}/theta", (q, p, k, 2), p * k * 2, rng))

    @property
    def max_steps(self) -> int:
        return self.theta.data.shape[2]


def diffusion_matrices(graph: SensorGraph, k: int) -> np.ndarray:
    """Stack of ``[(D_O^-1 W)^j, (D_I^-1 W^T)^j]`` for j < k, shape (2k, N, N)."""
    fwd, bwd = diffusion_supports(graph)
    n = graph.node_count
    mats = []
    pf = pb = np.eye(n)
    for _ in range(k):
        mats.extend([pf, pb])
        pf, pb = fwd @ pf, bwd @ pb
    return np.stack(mats)


def diffusion_forward(params: DiffusionParams, x, graph: SensorGraph | np.ndarray,
                      channels_last: bool = False) -> Tensor:
    """Bidirectional truncated random-walk diffusion.

    ``x`` is (..., N, P) or (..., N, P, T); the output replaces P with Q.  With
    ``channels_last`` the time-series layout is (..., N, T, P) instead.
    ``graph`` may be a precomputed ``diffusion_matrices`` stack.
    """
    x = nc.as_tensor(x)
    k = params.max_steps
    mats = graph if isinstance(graph, np.ndarray) else diffusion_matrices(graph, k)
    if mats.shape[0] != 2 * k:
        raise ShapeError(f"need {2 * k} diffusion matrices, got {mats.shape[0]}")
    if x.data.ndim == 2:
        n, p = x.data.shape
        out = nc.graph_diffusion(nc.reshape(x, (n, 1, p)), mats, params.theta)
        return nc.reshape(out, (n, out.data.shape[-1]))
    if channels_last:
        return nc.graph_diffusion(x, mats, params.theta)
    return nc.swap_last(nc.graph_diffusion(nc.swap_last(x), mats, params.theta))


def diffusion_tail_norm(alpha: float, k_max: int) -> float:
    """Weight of the stationary random-walk series left out by truncating after ``k_max``.

    ``sum_{k > k_max} alpha (1 - alpha)^k = (1 - alpha)^(k_max + 1)``.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if k_max < 0:
        raise ValueError("k_max must be non-negative")
    return (1.0 - alpha) ** (k_max + 1)


# ---------------------------------------------------------------- temporal convolution

@dataclass
class TcnParams:
    theta: Tensor  # (Q, P, K)
    dilation: int = 1

    @classmethod
    def create(cls, store: ParamStore, prefix: str, p: int, q: int, k: int, dilation: int,
               rng: np.random.Generator):
        if k < 1 or dilation < 1:
            raise ValueError("kernel size and dilation must be >= 1")
        return cls(store.init_uniform(f"{prefix}/theta", (q, p, k), p * k, rng), dilation)

    @property
    def kernel_size(self) -> int:
        return self.theta.data.shape[2]


def tcn_forward(params: TcnParams, x, channels_last: bool = False) -> Tensor:
    """Dilated causal convolution; (..., P, T) -> (..., Q, T), or (..., T, P) -> (..., T, Q)."""
    x = nc.as_tensor(x)
    if channels_last:
        return nc.causal_conv(x, params.theta, params.dilation)
    if x.data.shape[-1] < 1:
        raise ShapeError("TCN input needs at least one time step")
    return nc.swap_last(nc.causal_conv(nc.swap_last(x), params.theta, params.dilation))


# ---------------------------------------------------------------- merge

def merge_forward(block_outputs, channels_last: bool = False) -> Tensor:
    """Channel-wise concatenation of skip tensors shaped (..., N, F_l, T) (or (..., N, T, F_l))."""
    outs = [nc.as_tensor(b) for b in block_outputs]
    if not outs:
        raise ShapeError("merge needs at least one block output")
    ch = -1 if channels_last else -2
    keep = [a for a in range(outs[0].data.ndim) if a != outs[0].data.ndim + ch]
    ref = outs[0].data.shape
    for o in outs[1:]:
        s = o.data.shape
        if len(s) != len(ref) or any(s[a] != ref[a] for a in keep):
            raise ShapeError(f"block output shapes {ref} and {s} disagree on nodes or time")
    return outs[0] if len(outs) == 1 else nc.concat(outs, axis=ch)


# ---------------------------------------------------------------- dense

@dataclass
class DenseParams:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, n_in: int, n_out: int,
               rng: np.random.Generator):
        return cls(store.init_uniform(f"{prefix}/weight", (n_in, n_out), n_in, rng),
                   store.init_uniform(f"{prefix}/bias", (n_out,), n_in, rng))


def dense(params: DenseParams, x: Tensor) -> Tensor:
    return x @ params.weight + params.bias


# ---------------------------------------------------------------- inherent features

DAYS_PER_WEEK = 7
MONTHS_PER_YEAR = 12


@dataclass
class InherentParams:
    embed_day: Tensor    # (7, E_d)
    embed_month: Tensor  # (12, E_m)
    embed_hist: Tensor   # (1, E_h)
    fuse1: DenseParams
    fuse2: DenseParams

    @classmethod
    def create(cls, store: ParamStore, prefix: str, merged_width: int, e_d: int, e_m: int,
               e_h: int, hidden: int, out_width: int, rng: np.random.Generator):
        ed = store.init_uniform(f"{prefix}/embed_day", (DAYS_PER_WEEK, e_d), DAYS_PER_WEEK, rng)
        em = store.init_uniform(f"{prefix}/embed_month", (MONTHS_PER_YEAR, e_m),
                                MONTHS_PER_YEAR, rng)
        eh = store.init_uniform(f"{prefix}/embed_hist", (1, e_h), 1, rng)
        width = merged_width + e_d + e_m + e_h
        return cls(ed, em, eh,
                   DenseParams.create(store, f"{prefix}/fuse1", width, hidden, rng),
                   DenseParams.create(store, f"{prefix}/fuse2", hidden, out_width, rng))


def one_hot(index: np.ndarray, width: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= width):
        raise ValueError(f"one-hot index out of range [0, {width})")
    out = np.zeros(index.shape + (width,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def inherent_forward(params: InherentParams, merged, day_of_week, month, historic,
                     q: int = 1) -> Tensor:
    """Fuse merged embeddings with calendar one-hots and historic speed.

    ``merged`` is (B, N, ...) and is flattened per node; ``day_of_week`` and ``month`` are (B,) integer
    arrays (Monday = 0, January = 0); ``historic`` is (B, N), already on the
    model's normalized scale.  Returns (B, N, q, H) with ``H = fuse2 width / q``.
    """
    merged = nc.as_tensor(merged)
    b, n = merged.data.shape[:2]
    flat = nc.reshape(merged, (b, n, -1))
    day = np.broadcast_to(one_hot(day_of_week, DAYS_PER_WEEK)[:, None, :], (b, n, DAYS_PER_WEEK))
    mon = np.broadcast_to(one_hot(month, MONTHS_PER_YEAR)[:, None, :], (b, n, MONTHS_PER_YEAR))
    hist = np.asarray(historic, dtype=np.float64).reshape(b, n, 1)
    e_d = nc.matmul(day, params.embed_day)
    e_m = nc.matmul(mon, params.embed_month)
    e_h = nc.matmul(hist, params.embed_hist)
    fused = nc.concat([flat, e_d, e_m, e_h], axis=-1)
    h = nc.relu(dense(params.fuse1, fused))
    out = dense(params.fuse2, h)
    width = out.data.shape[-1]
    if width % q:
        raise ShapeError(f"fuse output width {width} not divisible by Q={q}")
    return nc.reshape(out, (b, n, q, width // q))
