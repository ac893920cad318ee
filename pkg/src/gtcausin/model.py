"""GT-CausIn network: causal insight -> L GT blocks with skips -> merge -> inherent fusion."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import layers as ly
from . import numcore as nc
from .data import Calendar
from .graph import SensorGraph, TransitionSet, build_transitions
from .numcore import ParamStore, Tensor

VARIANTS = ("CausIn", "NoCausIn", "BadCausIn")
VARIANT_ALIASES = {"gt-causin": "CausIn", "gt-nocausin": "NoCausIn", "gt-badcausin": "BadCausIn",
                   "causin": "CausIn", "nocausin": "NoCausIn", "badcausin": "BadCausIn"}


def parse_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    try:
        return VARIANT_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANT_ALIASES)}") from None


@dataclass
class ModelConfig:
    num_blocks: int = 4
    block_width: int = 8
    diffusion_steps: int = 3
    tcn_kernel: int = 3
    input_window: int = 12
    output_window: int = 12
    eval_horizons: tuple[int, ...] = (3, 6, 12)
    variant: str = "CausIn"
    seed: int = 0
    dense_width: int = 8
    fuse_hidden: int = 64
    embed_day: int = 4
    embed_month: int = 4
    embed_hist: int = 4
    attention_residual: bool = True

    def __post_init__(self):
        self.variant = parse_variant(self.variant)
        self.eval_horizons = tuple(int(h) for h in self.eval_horizons)
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if any(h < 1 or h > self.output_window for h in self.eval_horizons):
            raise ValueError("eval horizons must lie in [1, output_window]")
        for name in ("block_width", "diffusion_steps", "tcn_kernel", "input_window",
                     "output_window", "dense_width", "fuse_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_horizons"] = list(self.eval_horizons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Forecast:
    values: np.ndarray                 # (..., N, Q, T) speed units
    horizons: tuple[int, ...] = (3, 6, 12)

    def at(self, horizon: int) -> np.ndarray:
        """Prediction ``horizon`` steps ahead, shape (..., N, Q)."""
        return self.values[..., horizon - 1]


@dataclass
class GTCausIn:
    config: ModelConfig
    graph: SensorGraph
    params: ParamStore
    norm_stats: tuple[float, float] = (0.0, 1.0)
    transitions: TransitionSet = field(init=False)
    diffusion_mats: np.ndarray = field(init=False)

    IN_CHANNELS = 2  # speed and its first difference

    def __post_init__(self):
        self.transitions = build_transitions(self.graph)
        self.diffusion_mats = ly.diffusion_matrices(self.graph, self.config.diffusion_steps)

    # ---- parameter views
    @property
    def insight(self) -> ly.CausalInsightParams | None:
        if self.config.variant == "NoCausIn":
            return None
        return ly.CausalInsightParams(*(self.params[f"causal_insight/{n}"]
                                        for n in ly.CausalInsightParams.NAMES))

    def block_params(self, l: int) -> tuple[ly.DiffusionParams, ly.TcnParams]:
        return (ly.DiffusionParams(self.params[f"block{l}/diffusion/theta"]),
                ly.TcnParams(self.params[f"block{l}/tcn/theta"], dilation=2 ** l))

    def dense_pair(self) -> tuple[ly.DenseParams, ly.DenseParams]:
        return tuple(ly.DenseParams(self.params[f"post_block0/dense{k}/weight"],
                                    self.params[f"post_block0/dense{k}/bias"]) for k in (1, 2))

    def inherent(self) -> ly.InherentParams:
        p = self.params
        return ly.InherentParams(
            p["inherent/embed_day"], p["inherent/embed_month"], p["inherent/embed_hist"],
            ly.DenseParams(p["inherent/fuse1/weight"], p["inherent/fuse1/bias"]),
            ly.DenseParams(p["inherent/fuse2/weight"], p["inherent/fuse2/bias"]))

    # ---- forward
    def input_features(self, window: np.ndarray) -> np.ndarray:
        """(B, N, T) normalized speeds -> (B, N, T, 2): speed and zero-padded first difference."""
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 4:
            if window.shape[2] != 1:
                raise ValueError("only P = 1 speed inputs are supported")
            window = window[:, :, 0, :]
        if window.ndim != 3:
            raise ValueError(f"window must be (B, N, T), got {window.shape}")
        if window.shape[1] != self.graph.node_count or window.shape[2] != self.config.input_window:
            raise ValueError(f"window shape {window.shape} does not match the model")
        if not np.all(np.isfinite(window)):
            raise ValueError("window contains NaN or Inf; interpolate upstream")
        var = np.zeros_like(window)
        var[..., 1:] = np.diff(window, axis=-1)
        return np.stack([window, var], axis=-1)

    def apply_insight(self, feats: Tensor) -> Tensor:
        """(B, N, T, 2) features -> (B, N, T, 2) causal-insight output (identity for NoCausIn)."""
        cfg = self.config
        if cfg.variant == "NoCausIn":
            return feats
        b, n, t, c = feats.data.shape
        tokens = nc.reshape(feats, (b, n, t * c))
        if cfg.variant == "CausIn":
            out = ly.causal_insight_forward(self.insight, tokens, self.transitions,
                                            residual=cfg.attention_residual)
        else:
            out = ly.bad_causal_insight_forward(self.insight, tokens,
                                                residual=cfg.attention_residual)
        return nc.reshape(out, (b, n, t, c))

    def blocks_forward(self, h: Tensor, skip_filter: Callable[[list], list] | None = None
                       ) -> tuple[Tensor, list[Tensor]]:
        """Run the GT block stack on (B, N, T, C); returns the merged skips and the skip list."""
        skips = []
        for l in range(self.config.num_blocks):
            diff, tcn = self.block_params(l)
            h = ly.diffusion_forward(diff, h, self.diffusion_mats, channels_last=True)
            h = ly.tcn_forward(tcn, h, channels_last=True)
            skips.append(h)
            if l == 0:
                d1, d2 = self.dense_pair()
                h = ly.dense(d2, nc.relu(ly.dense(d1, h)))
        used = skip_filter(skips) if skip_filter else skips
        return ly.merge_forward(used, channels_last=True), skips

    def forward_tensor(self, window: np.ndarray, calendar: Calendar,
                       insight: Callable[[Tensor], Tensor] | None = None,
                       skip_filter: Callable[[list], list] | None = None) -> Tensor:
        """Differentiable forward pass; returns predictions (B, N, 1, T) in speed units."""
        feats = Tensor(self.input_features(window))
        h = (insight or self.apply_insight)(feats)
        merged, _ = self.blocks_forward(h, skip_filter)
        mean, std = self.norm_stats
        hist = (np.asarray(calendar.historic, dtype=np.float64) - mean) / std
        out = ly.inherent_forward(self.inherent(), merged, calendar.day_of_week, calendar.month,
                                  hist, q=1)
        return nc.scale(out, std) + mean

    def predict(self, window: np.ndarray, calendar: Calendar) -> Forecast:
        values = self.forward_tensor(window, calendar).data
        return Forecast(values, self.config.eval_horizons)

    # ---- checkpoints
    def header(self) -> dict:
        return {"config": self.config.to_dict(), "norm_stats": list(self.norm_stats),
                "node_ids": self.graph.node_ids,
                "adjacency": [[float(v) for v in row] for row in self.graph.adjacency]}

    def save(self, path: str | Path):
        nc.save_params(path, self.params.snapshot(), self.header())

    @classmethod
    def load(cls, path: str | Path) -> "GTCausIn":
        values, header = nc.load_params(path)
        cfg = ModelConfig.from_dict(header["config"])
        graph = SensorGraph(np.array(header["adjacency"]), header["node_ids"])
        model = build(cfg, graph)
        model.params.load(values)
        model.norm_stats = tuple(header["norm_stats"])
        return model


def build(config: ModelConfig, graph: SensorGraph, rng_seed: int | None = None,
          norm_stats: tuple[float, float] = (0.0, 1.0)) -> GTCausIn:
    """Initialize a model; parameters are deterministic in the seed."""
    cfg = config
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    store = ParamStore()
    t_in = cfg.input_window
    c_in = GTCausIn.IN_CHANNELS
    if cfg.variant != "NoCausIn":
        ly.CausalInsightParams.create(store, "causal_insight", c_in * t_in, rng)
    width = cfg.block_width
    for l in range(cfg.num_blocks):
        p = c_in if l == 0 else width
        ly.DiffusionParams.create(store, f"block{l}/diffusion", p, width, cfg.diffusion_steps, rng)
        ly.TcnParams.create(store, f"block{l}/tcn", width, width, cfg.tcn_kernel, 2 ** l, rng)
        if l == 0:
            ly.DenseParams.create(store, "post_block0/dense1", width, cfg.dense_width, rng)
            ly.DenseParams.create(store, "post_block0/dense2", cfg.dense_width, width, rng)
    merged_width = width * cfg.num_blocks * t_in
    ly.InherentParams.create(store, "inherent", merged_width, cfg.embed_day, cfg.embed_month,
                             cfg.embed_hist, cfg.fuse_hidden, cfg.output_window, rng)
    return GTCausIn(cfg, graph, store, tuple(norm_stats))


def forward(model: GTCausIn, window: np.ndarray, calendar: Calendar) -> Forecast:
    return model.predict(window, calendar)


def bad_causal_forward(model: GTCausIn, window: np.ndarray, calendar: Calendar) -> Forecast:
    if model.config.variant != "BadCausIn":
        raise ValueError("bad_causal_forward requires a BadCausIn model")
    return model.predict(window, calendar)
