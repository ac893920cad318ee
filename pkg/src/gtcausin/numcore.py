"""Float64 reverse-mode tensors, parameter store, Adam and step decay.

Every op builds its output eagerly and records a closure that pushes the
output gradient back to its inputs.  ``Tensor.backward`` walks the recorded
graph in reverse topological order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "gtcausin-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, check: bool = True):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad and _backward is None else None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None):
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate grads are fresh per call; leaves accumulate
        for node in order:
            if node._backward is not None:
                node.grad = None
        seed = np.array(grad, dtype=np.float64)
        self.grad = seed if self._backward is not None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                 _backward=backward if needs else None, check=False)
    return out


def _accum(t: Tensor, g: np.ndarray):
    # never in place: g may alias another node's gradient
    if t.requires_grad:
        g = _unbroadcast(g, t.data.shape)
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _accum(a, g)
        _accum(b, g)
    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)
    return _make(a.data * c, (a,), backward)


# activation patterns of non-smooth ops, recorded while a kink trace is active
_KINK_TRACE: list | None = None


class kink_trace:
    """Context manager recording the sign patterns of ``relu`` and ``absolute`` calls."""

    def __enter__(self) -> list:
        global _KINK_TRACE
        self._prev = _KINK_TRACE
        _KINK_TRACE = []
        return _KINK_TRACE

    def __exit__(self, *exc):
        global _KINK_TRACE
        _KINK_TRACE = self._prev


def _record(pattern: np.ndarray):
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(pattern)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    _record(pos)

    def backward(g):
        _accum(a, g * pos)
    return _make(np.where(pos, a.data, 0.0), (a,), backward)


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    _record(sgn)

    def backward(g):
        _accum(a, g * sgn)
    return _make(np.abs(a.data), (a,), backward)


# ---------------------------------------------------------------- reductions / shape

def total(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.data.shape))
    return _make(np.asarray(a.data.sum()), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _accum(a, g.reshape(a.data.shape))
    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))
    return _make(a.data.transpose(axes), (a,), backward)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            _accum(a, full)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (idx if isinstance(idx, tuple) else (idx,)))
    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
    return _make(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, k, axis=axis))
    return _make(data, tensors, backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` over the last two axes, with numpy broadcasting of batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            if a.data.ndim == 2 and g.ndim > 2:
                # shared left operand: fold batch axes into the contraction
                k = a.data.shape[1]
                bt = np.broadcast_to(b.data, g.shape[:-2] + b.data.shape[-2:])
                _accum(a, np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2]).T
                       @ np.swapaxes(bt, -1, -2).reshape(-1, k))
            else:
                _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.data.ndim == 2 and g.ndim > 2:
                # shared weight: fold batch axes into the contraction
                m = a.data.shape[-1]
                at = np.broadcast_to(a.data, g.shape[:-1] + (m,))
                _accum(b, at.reshape(-1, m).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
    return _make(data, (a, b), backward)


def softmax_rows(scores) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    scores = as_tensor(scores)
    z = scores.data - scores.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _make(p, (scores,), backward)


def causal_conv(x: Tensor, theta: Tensor, dilation: int) -> Tensor:
    """Dilated causal convolution over time, channels last.

    ``x`` is (..., T, P), ``theta`` is (Q, P, K); returns (..., T, Q) with
    ``out[..., t, q] = sum_{p,k} theta[q, p, k] * x[..., t - dilation*k, p]`` and
    zero for negative times.  The taps are unfolded into a (..., T, K*P) buffer
    so the whole layer is one matrix product.
    """
    if dilation < 1:
        raise ShapeError("dilation must be >= 1")
    q, p, k = theta.data.shape
    if x.data.shape[-1] != p:
        raise ShapeError(f"causal_conv expects {p} input channels, got {x.data.shape[-1]}")
    t_len = x.data.shape[-2]
    lead = x.data.shape[:-2]
    shifts = [dilation * j for j in range(k)]
    unf = np.zeros(lead + (t_len, k, p))
    for j, s in enumerate(shifts):
        if s < t_len:
            unf[..., s:, j, :] = x.data[..., : t_len - s, :]
    unf = unf.reshape(-1, k * p)
    w = theta.data.transpose(2, 1, 0).reshape(k * p, q)
    out = (unf @ w).reshape(lead + (t_len, q))

    def backward(g):
        g2 = g.reshape(-1, q)
        if theta.requires_grad:
            _accum(theta, (unf.T @ g2).reshape(k, p, q).transpose(2, 1, 0))
        if x.requires_grad:
            gu = (g2 @ w.T).reshape(lead + (t_len, k, p))
            gx = np.zeros_like(x.data)
            for j, s in enumerate(shifts):
                if s < t_len:
                    gx[..., : t_len - s, :] += gu[..., s:, j, :]
            _accum(x, gx)
    return _make(out, (x, theta), backward)


def graph_diffusion(x: Tensor, mats: np.ndarray, theta: Tensor) -> Tensor:
    """Weighted sum of constant node-mixing supports, channels last.

    ``x`` is (..., N, T, P); ``mats`` is (2K, N, N) ordered
    ``[M_f^0, M_b^0, M_f^1, M_b^1, ...]``; ``theta`` is (Q, P, K, 2).  Returns
    (..., N, T, Q) with ``out[..., n, t, q] = sum_{k,d,p} theta[q,p,k,d] (M_{d}^k x[..., t, p])[n]``.
    """
    q, p, k, two = theta.data.shape
    s = mats.shape[0]
    n = mats.shape[-1]
    if two != 2 or s != 2 * k:
        raise ShapeError(f"theta {theta.data.shape} does not match {s} supports")
    if x.data.ndim < 3 or x.data.shape[-3] != n or x.data.shape[-1] != p:
        raise ShapeError(f"diffusion input {x.data.shape} does not match N={n}, P={p}")
    lead = x.data.shape[:-3]
    t_len = x.data.shape[-2]
    nl = len(lead)
    xn = np.moveaxis(x.data, nl, 0).reshape(n, -1)               # (N, lead*T*P)
    m2 = mats.reshape(s * n, n)
    y = (m2 @ xn).reshape((s, n) + lead + (t_len, p))
    # (lead..., N, T, S, P)
    perm = tuple(range(2, 2 + nl)) + (1, 2 + nl, 0, 3 + nl)
    z = y.transpose(perm).reshape(-1, s * p)
    w = theta.data.transpose(2, 3, 1, 0).reshape(s * p, q)
    out = (z @ w).reshape(lead + (n, t_len, q))

    def backward(g):
        g2 = g.reshape(-1, q)
        if theta.requires_grad:
            _accum(theta, (z.T @ g2).reshape(k, 2, p, q).transpose(3, 2, 0, 1))
        if x.requires_grad:
            gz = (g2 @ w.T).reshape(lead + (n, t_len, s, p))
            gy = gz.transpose(np.argsort(perm)).reshape(s * n, -1)
            gxn = (m2.T @ gy).reshape((n,) + lead + (t_len, p))
            _accum(x, np.moveaxis(gxn, 0, nl))
    return _make(out, (x, theta), backward)


def node_mix(mats: np.ndarray, x: Tensor) -> Tensor:
    """Apply constant node-mixing matrices: ``out[..., s, n, f] = sum_m mats[s, n, m] x[..., m, f]``.

    ``mats`` is (S, N, N); ``x`` is (..., N, F).  The support axis is inserted
    just before the node axis.
    """
    s, n = mats.shape[0], mats.shape[-1]
    if x.data.ndim < 2 or x.data.shape[-2] != n:
        raise ShapeError(f"node_mix expects {n} nodes, got {x.data.shape}")
    lead = x.data.shape[:-2]
    f = x.data.shape[-1]
    nl = len(lead)
    m2 = mats.reshape(s * n, n)
    xn = np.moveaxis(x.data, nl, 0).reshape(n, -1)
    y = (m2 @ xn).reshape((s, n) + lead + (f,))
    perm = tuple(range(2, 2 + nl)) + (0, 1, 2 + nl)
    data = y.transpose(perm)

    def backward(g):
        gy = g.transpose(np.argsort(perm)).reshape(s * n, -1)
        _accum(x, np.moveaxis((m2.T @ gy).reshape((n,) + lead + (f,)), 0, nl))
    return _make(np.ascontiguousarray(data), (x,), backward)


def mean_abs_error(pred: Tensor, truth: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked mean absolute error as a differentiable scalar."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked MAE over zero observed entries")
    diff = np.where(mask, pred.data - np.where(mask, truth, 0.0), 0.0)
    sgn = np.sign(diff)

    def backward(g):
        _accum(pred, g * sgn / count)
    return _make(np.asarray(np.abs(diff).sum() / count), (pred,), backward)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable tensors keyed by hierarchical path (``block0/tcn/theta``)."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._entries[name] = t
        return t

    def init_uniform(self, name: str, shape: Sequence[int], fan_in: int,
                     rng: np.random.Generator) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=tuple(shape)))

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def load(self, values: dict[str, np.ndarray]):
        if set(values) != set(self._entries):
            missing = set(self._entries) ^ set(values)
            raise KeyError(f"parameter set mismatch: {sorted(missing)}")
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._entries[k].data.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self._entries[k].data.shape}")
            self._entries[k].data = v.copy()

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([t.grad.ravel() for t in self._entries.values()])


def params_to_json(values: dict[str, np.ndarray]) -> list[dict]:
    return [{"path": k, "shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
            for k, v in values.items()]


def params_from_json(entries: Iterable[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        vals = np.array(e["values"], dtype=np.float64)
        if vals.size != math.prod(shape):
            raise ShapeError(f"{e['path']}: {vals.size} values for shape {shape}")
        out[e["path"]] = vals.reshape(shape)
    return out


def save_params(path: str | Path, values: dict[str, np.ndarray], header: dict | None = None):
    """Write a parameter checkpoint.

    Layout (JSON, UTF-8)::

        {"format": "gtcausin-params", "version": 1, "header": {...},
         "params": [{"path": str, "shape": [int...], "values": [float...]}, ...]}

    ``values`` are row-major; floats are written with shortest round-trip repr.
    """
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "header": header or {}, "params": params_to_json(values)}
    Path(path).write_text(json.dumps(doc, indent=None, separators=(",", ":")) + "\n",
                          encoding="utf-8")


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return params_from_json(doc["params"]), doc.get("header", {})


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    base_lr: float = 1e-3
    decay_gamma: float = 0.5
    decay_start_step: int = 180
    decay_step_size: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    # schedule position; the training loop advances it once per epoch
    schedule_step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.decay_gamma <= 1:
            raise ValueError("decay_gamma must be in (0, 1]")
        if self.decay_start_step < 1 or self.decay_step_size < 1:
            raise ValueError("decay_start_step and decay_step_size must be positive")


def lr_at(state: OptimState, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < state.decay_start_step:
        return state.base_lr
    decays = 1 + (step - state.decay_start_step) // state.decay_step_size
    return state.base_lr * state.decay_gamma ** decays


def adam_step(params: ParamStore, state: OptimState) -> float:
    """One bias-corrected Adam update in place; returns the learning rate used."""
    lr = lr_at(state, state.schedule_step)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


# ---------------------------------------------------------------- gradient checking

def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, epsilon: float = 1e-6,
               indices: Sequence[tuple[int, ...]] | None = None, floor: float = 1e-6) -> float:
    """Max element-wise relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor.  ``indices`` restricts the check to
    a subset of coordinates (all coordinates when omitted).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    point = np.array(point, dtype=np.float64)
    x = Tensor(point, requires_grad=True)
    out = fn(x)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check needs a finite scalar output")
    out.backward()
    analytic = x.grad
    if indices is None:
        indices = list(np.ndindex(point.shape))
    num = np.empty(len(indices))
    ana = np.empty(len(indices))
    for k, idx in enumerate(indices):
        plus = point.copy()
        plus[idx] += epsilon
        minus = point.copy()
        minus[idx] -= epsilon
        fp = float(fn(Tensor(plus)).data)
        fm = float(fn(Tensor(minus)).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite output at coordinate {idx}")
        num[k] = (fp - fm) / (2 * epsilon)
        ana[k] = analytic[idx]
    return float(relative_errors(ana, num, floor).max()) if len(indices) else 0.0


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_params(loss_fn: Callable[[], Tensor], params: ParamStore, rng: np.random.Generator,
                      per_param: int = 3, epsilon: float = 1e-6, floor: float = 1e-6,
                      skip_kinks: bool = True, stats: dict | None = None) -> float:
    """Finite-difference check of ``loss_fn`` against the grads it writes into ``params``.

    Samples ``per_param`` coordinates from every parameter tensor.  With
    ``skip_kinks`` a coordinate whose +/- epsilon probes flip any relu/abs
    activation is skipped (the central difference straddles a kink there);
    ``stats`` receives the checked and skipped counts.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    params.zero_grads()
    with kink_trace() as base:
        loss = loss_fn()
    loss.backward()
    grads = {k: t.grad.copy() for k, t in params.items()}
    worst = 0.0
    checked = skipped = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + epsilon
            with kink_trace() as tp:
                fp = float(loss_fn().data)
            flat[i] = orig - epsilon
            with kink_trace() as tm:
                fm = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss probing {name}[{i}]")
            if skip_kinks and not (_same_pattern(base, tp) and _same_pattern(base, tm)):
                skipped += 1
                continue
            checked += 1
            num = (fp - fm) / (2 * epsilon)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, float(relative_errors(np.array([ana]), np.array([num]), floor)[0]))
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst
