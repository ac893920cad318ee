"""Masked metrics, the MAE training loop, evaluation and the ablation harness."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .data import SpeedDataset, WindowSet, window_set
from .graph import SensorGraph
from .model import GTCausIn, ModelConfig, build
from .numcore import OptimState, adam_step, lr_at

log = logging.getLogger(__name__)

STEP_MINUTES = 5


class MetricError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- metrics

def _masked(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (pred.shape == truth.shape == mask.shape):
        raise MetricError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    if not mask.any():
        raise MetricError("metric undefined: no observed entries")
    return pred[mask], truth[mask]


def masked_mae(pred, truth, mask) -> float:
    p, t = _masked(pred, truth, mask)
    return float(np.abs(t - p).mean())


def masked_rmse(pred, truth, mask) -> float:
    p, t = _masked(pred, truth, mask)
    return float(np.sqrt(((t - p) ** 2).mean()))


def masked_mape(pred, truth, mask) -> float:
    """Mean absolute percentage error as a fraction; zero-truth entries are skipped."""
    return masked_mape_counted(pred, truth, mask)[0]


def masked_mape_counted(pred, truth, mask) -> tuple[float, int]:
    p, t = _masked(pred, truth, mask)
    nz = t != 0
    skipped = int((~nz).sum())
    if not nz.any():
        raise MetricError("MAPE undefined: every observed truth is zero")
    return float(np.abs((t[nz] - p[nz]) / t[nz]).mean()), skipped


def improvement(base: float, ours: float) -> float:
    """Relative error reduction ``(base - ours) / base``."""
    if base == 0:
        raise MetricError("improvement undefined for a zero baseline")
    return (base - ours) / base


@dataclass
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float
    count: int
    mape_skipped: int = 0


@dataclass
class MetricsReport:
    variant: str
    split: str
    horizons: dict[int, HorizonMetrics]  # keyed by minutes ahead
    seed: int | None = None
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {"variant": self.variant, "split": self.split, "seed": self.seed,
                "config_digest": self.config_digest,
                "horizons": {str(m): vars(h) for m, h in sorted(self.horizons.items())}}


# ---------------------------------------------------------------- batching

def _predict(model: GTCausIn, ws: WindowSet, batch_size: int = 256) -> np.ndarray:
    outs = []
    for lo in range(0, len(ws), batch_size):
        part = ws.take(slice(lo, lo + batch_size))
        outs.append(model.forward_tensor(part.inputs, part.calendar).data[:, :, 0, :])
    if not outs:
        return np.zeros((0,) + ws.targets.shape[1:])
    return np.concatenate(outs, axis=0)


def batch_loss(model: GTCausIn, batch: WindowSet) -> nc.Tensor:
    """MAE in speed units over every observed target cell of the batch."""
    pred = model.forward_tensor(batch.inputs, batch.calendar)
    return nc.mean_abs_error(nc.reshape(pred, batch.targets.shape), batch.targets,
                             batch.target_mask)


def split_mae(model: GTCausIn, ws: WindowSet) -> float:
    if len(ws) == 0 or not ws.target_mask.any():
        return math.nan
    return masked_mae(_predict(model, ws), ws.targets, ws.target_mask)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def curve_rows(self):
        return [(r["epoch"], r["train_mae"], r["val_mae"], r["lr"]) for r in self.curve]


def train(model: GTCausIn, dataset: SpeedDataset, epochs: int, optim: OptimState | None = None,
          seed: int = 0, batch_size: int = 16, patience: int = 15,
          train_windows: WindowSet | None = None, val_windows: WindowSet | None = None,
          stop_below: float | None = None) -> TrainResult:
    """Mini-batch Adam on masked MAE with a per-epoch step schedule.

    The learning-rate schedule advances once per epoch.  The returned
    checkpoint is the parameter set with the best validation MAE (the initial
    parameters when ``epochs`` is 0, or when there are no validation windows
    the final ones).
    """
    optim = optim or OptimState()
    cfg = model.config
    model.norm_stats = dataset.norm_stats
    tw = train_windows if train_windows is not None else window_set(
        dataset, "train", cfg.input_window, cfg.output_window)
    vw = val_windows if val_windows is not None else window_set(
        dataset, "val", cfg.input_window, cfg.output_window)
    rng = np.random.default_rng(seed)
    best = model.params.snapshot()
    best_val = math.inf
    result = TrainResult(best)
    stale = 0
    for epoch in range(epochs):
        optim.schedule_step = epoch
        lr = lr_at(optim, epoch)
        order = rng.permutation(len(tw))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = tw.take(order[lo:lo + batch_size])
            n_obs = int(batch.target_mask.sum())
            if n_obs == 0:
                continue
            model.params.zero_grads()
            loss = batch_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}")
            loss.backward()
            adam_step(model.params, optim)
            total += value * n_obs
            count += n_obs
        train_mae = total / count if count else math.nan
        val_mae = split_mae(model, vw)
        result.curve.append({"epoch": epoch, "train_mae": train_mae, "val_mae": val_mae, "lr": lr})
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_mae, val_mae, lr)
        if not math.isfinite(train_mae):
            raise DivergenceError(f"training MAE became {train_mae} at epoch {epoch}")
        if stop_below is not None and train_mae < stop_below:
            result.best_params = model.params.snapshot()
            result.best_epoch = epoch
            log.info("training MAE %.4f below %.4f at epoch %d", train_mae, stop_below, epoch)
            return result
        score = val_mae if math.isfinite(val_mae) else train_mae
        if score < best_val or not math.isfinite(val_mae):
            best_val = score
            best = model.params.snapshot()
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                log.info("early stop at epoch %d", epoch)
                break
    result.best_params = best
    return result


# ---------------------------------------------------------------- evaluation

def evaluate(model: GTCausIn, dataset: SpeedDataset, split: str = "test",
             windows: WindowSet | None = None, seed: int | None = None) -> MetricsReport:
    cfg = model.config
    if dataset.norm_stats is None or not np.allclose(model.norm_stats, dataset.norm_stats,
                                                     rtol=1e-12, atol=0):
        raise ValueError("model and dataset normalization stats differ")
    ws = windows if windows is not None else window_set(dataset, split, cfg.input_window,
                                                        cfg.output_window)
    if len(ws) == 0:
        raise MetricError(f"split {split!r} has no windows")
    pred = _predict(model, ws)
    out = {}
    for h in cfg.eval_horizons:
        p, t, m = pred[..., h - 1], ws.targets[..., h - 1], ws.target_mask[..., h - 1]
        mape, skipped = masked_mape_counted(p, t, m)
        out[h * STEP_MINUTES] = HorizonMetrics(masked_mae(p, t, m), masked_rmse(p, t, m), mape,
                                               int(m.sum()), skipped)
    return MetricsReport(cfg.variant, split, out, seed, cfg.digest())


# ---------------------------------------------------------------- ablation

def _label(cfg: ModelConfig) -> str:
    return f"{cfg.variant}(L={cfg.num_blocks})"


def ablation_run(configs: list[ModelConfig], dataset: SpeedDataset, graph: SensorGraph,
                 seeds: list[int], epochs: int, optim: OptimState | None = None,
                 split: str = "test", batch_size: int = 16, patience: int = 15) -> dict:
    """Train every (config, seed), then tabulate mean metrics and pairwise improvements."""
    base_optim = optim or OptimState()
    cfg0 = configs[0]
    tw = window_set(dataset, "train", cfg0.input_window, cfg0.output_window)
    vw = window_set(dataset, "val", cfg0.input_window, cfg0.output_window)
    ew = window_set(dataset, split, cfg0.input_window, cfg0.output_window)
    rows = []
    for cfg in configs:
        label = _label(cfg)
        per_seed = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            model = build(run_cfg, graph, norm_stats=dataset.norm_stats)
            state = replace(base_optim, first_moment={}, second_moment={}, step_count=0,
                            schedule_step=0)
            res = train(model, dataset, epochs, state, seed=seed, batch_size=batch_size,
                        patience=patience, train_windows=tw, val_windows=vw)
            model.params.load(res.best_params)
            per_seed.append(evaluate(model, dataset, split, windows=ew, seed=seed))
        means = {}
        for minutes in per_seed[0].horizons:
            means[minutes] = {k: float(np.mean([getattr(r.horizons[minutes], k) for r in per_seed]))
                              for k in ("mae", "rmse", "mape")}
        rows.append({"label": label, "variant": cfg.variant, "num_blocks": cfg.num_blocks,
                     "seeds": list(seeds), "metrics": means,
                     "per_seed": [r.to_dict() for r in per_seed]})
    improvements = []
    for i, a in enumerate(rows):
        for j, b in enumerate(rows):
            if i == j:
                continue
            improvements.append({
                "ours": a["label"], "base": b["label"],
                "horizons": {str(m): {k: improvement(b["metrics"][m][k], a["metrics"][m][k])
                                      for k in ("mae", "rmse", "mape")}
                             for m in a["metrics"]}})
    return {"split": split, "epochs": epochs, "rows": rows, "improvements": improvements}
