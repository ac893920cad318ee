"""Command-line pipelines.  Every artifact command writes one ``manifest.json``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Settings resolve as flags > ``--config`` JSON > defaults.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import causal as ca
from . import data as dio
from . import layers as ly
from . import synthetic as sy
from .graph import (GraphError, SensorGraph, build_adjacency, build_transitions, read_distances,
                    write_distances)
from .model import GTCausIn, ModelConfig, build, parse_variant
from .numcore import NonFiniteError, OptimState, ShapeError
from .train import DivergenceError, MetricError, _predict, ablation_run, evaluate, train

log = logging.getLogger("gtcausin")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(*paths):
    for p in paths:
        if p is None or not Path(p).exists():
            raise UsageError(f"input not found: {p}")


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    return repr(float(x))


def _resolve(args, defaults: dict) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        _require(args.config)
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"config {args.config}: unknown keys {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs: list[Path],
              args) -> Path:
    """One manifest per command; paths of outputs are relative to the output directory."""
    doc = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in sorted(inputs.items())},
        "outputs": {p.relative_to(out).as_posix(): sha256(p) for p in sorted(outputs)},
        "version": __version__,
        "wall_clock_s": round(time.perf_counter() - args._t0, 3) if args.record_time else None,
    }
    path = out / "manifest.json"
    _dump(path, doc)
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prepared(directory) -> tuple[dio.SpeedDataset, SensorGraph, dict]:
    d = Path(directory)
    _require(d / "speeds.csv", d / "dataset.json", d / "graph.json")
    meta = json.loads((d / "dataset.json").read_text())
    ds = dio.load_speed_csv(d / "speeds.csv", zero_is_missing=meta["zero_is_missing"],
                            unit=meta["unit"])
    ds = dio.with_split(ds, (meta["split"]["train_end"], meta["split"]["val_end"]))
    return ds, _load_graph(d / "graph.json"), meta


def _load_graph(path) -> SensorGraph:
    _require(path)
    g = json.loads(Path(path).read_text())
    return SensorGraph(np.array(g["adjacency"], dtype=np.float64), list(g["node_ids"]))


def _prepared_inputs(directory) -> dict:
    d = Path(directory)
    return {"speeds": d / "speeds.csv", "dataset": d / "dataset.json", "graph": d / "graph.json"}


def _check_nodes(ds: dio.SpeedDataset, graph: SensorGraph):
    if list(ds.node_ids) != list(graph.node_ids):
        raise dio.DataError("dataset sensors and graph nodes differ")


def _station(value: str, graph: SensorGraph) -> int:
    if value in graph.node_ids:
        return graph.index(value)
    try:
        idx = int(value)
    except ValueError:
        raise UsageError(f"unknown station {value!r}") from None
    if not 0 <= idx < graph.node_count:
        raise UsageError(f"station index {idx} out of range")
    return idx


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    defaults = {"kind": "periodic", "nodes": 20, "steps": 2000, "seed": 0}
    cfg = _resolve(args, defaults)
    out = _out_dir(args.out)
    graph = sy.ring_road_graph(cfg["nodes"], cfg["seed"])
    makers = {"periodic": sy.periodic_dataset, "planted": sy.planted_dataset,
              "benchmark": sy.planted_benchmark, "variation": sy.planted_variation_dataset}
    ds = makers[cfg["kind"]](graph, cfg["steps"], cfg["seed"])
    speeds, dist = out / "speeds.csv", out / "distances.csv"
    dio.save_speed_csv(speeds, ds)
    write_distances(dist, sy.ring_road_distances(cfg["nodes"], cfg["seed"]))
    d = np.array([c for _, _, c in sy.ring_road_distances(cfg["nodes"], cfg["seed"])])
    hints = out / "graph_params.json"
    _dump(hints, {"sigma": float(d.std()) or 1.0, "kappa": float(d.max())})
    _manifest(out, "synth", cfg, cfg["seed"], {}, [speeds, dist, hints], args)
    return EXIT_OK


def cmd_prepare(args) -> int:
    _require(args.speeds, args.distances)
    cfg = _resolve(args, {"sigma": None, "kappa": None, "keep_zeros": False, "unit": "mph"})
    if cfg["sigma"] is None or cfg["kappa"] is None:
        raise UsageError("--sigma and --kappa are required")
    zero_missing = not cfg["keep_zeros"]
    ds = dio.load_speed_csv(args.speeds, zero_is_missing=zero_missing, unit=cfg["unit"])
    ds = dio.with_split(dio.aggregate_5min(ds))
    graph = build_adjacency(read_distances(args.distances), cfg["sigma"], cfg["kappa"],
                            node_ids=ds.node_ids)
    out = _out_dir(args.out)
    speeds, meta, gpath = out / "speeds.csv", out / "dataset.json", out / "graph.json"
    dio.save_speed_csv(speeds, ds)
    _dump(meta, dio.manifest(ds, zero_missing))
    _dump(gpath, {"node_ids": graph.node_ids, "sigma": cfg["sigma"], "kappa": cfg["kappa"],
                  "adjacency": [[float(v) for v in row] for row in graph.adjacency]})
    _manifest(out, "prepare-data", cfg, None,
              {"speeds": Path(args.speeds), "distances": Path(args.distances)},
              [speeds, meta, gpath], args)
    return EXIT_OK


TRAIN_DEFAULTS = {"variant": "CausIn", "blocks": 4, "epochs": 100, "seed": 0, "lr": 1e-3,
                  "lr_start": 180, "lr_step": 50, "gamma": 0.5, "batch_size": 16,
                  "patience": 15}


def _optim(cfg) -> OptimState:
    return OptimState(base_lr=cfg["lr"], decay_gamma=cfg["gamma"],
                      decay_start_step=cfg["lr_start"], decay_step_size=cfg["lr_step"])


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    try:
        cfg["variant"] = parse_variant(cfg["variant"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds, graph, _ = _load_prepared(args.data)
    _check_nodes(ds, graph)
    mcfg = ModelConfig(num_blocks=cfg["blocks"], variant=cfg["variant"], seed=cfg["seed"])
    model = build(mcfg, graph, norm_stats=ds.norm_stats)
    res = train(model, ds, cfg["epochs"], _optim(cfg), seed=cfg["seed"],
                batch_size=cfg["batch_size"], patience=cfg["patience"])
    model.params.load(res.best_params)
    out = _out_dir(args.out)
    ckpt, loss = out / "checkpoint.json", out / "loss.csv"
    model.save(ckpt)
    _write_csv(loss, ["epoch", "train_mae", "val_mae", "lr"],
               [(e, _num(a), _num(b), _num(c)) for e, a, b, c in res.curve_rows()])
    _manifest(out, "train", dict(cfg, model=mcfg.to_dict(), best_epoch=res.best_epoch),
              cfg["seed"], _prepared_inputs(args.data), [ckpt, loss], args)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args.checkpoint)
    model = GTCausIn.load(args.checkpoint)
    ds, _, _ = _load_prepared(args.data)
    _check_nodes(ds, model.graph)
    rep = evaluate(model, ds, args.split)
    out = _out_dir(args.out)
    path = out / "metrics.json"
    _dump(path, rep.to_dict())
    inputs = dict(_prepared_inputs(args.data), checkpoint=Path(args.checkpoint))
    _manifest(out, "evaluate", {"split": args.split}, model.config.seed, inputs, [path], args)
    return EXIT_OK


def cmd_causal_extract(args) -> int:
    cfg = _resolve(args, {"mode": "random", "batch": 2000, "repeats": 100, "seed": 0})
    ds, graph, _ = _load_prepared(args.data)
    if args.graph:
        graph = _load_graph(args.graph)
    _check_nodes(ds, graph)
    tr = build_transitions(graph)
    out = _out_dir(args.out)
    outputs = []
    events = None
    if cfg["mode"] == "event":
        events = ca.detect_events(ds, tr)
        ev_path = out / "events.csv"
        _write_csv(ev_path, ["node", "t", "magnitude"],
                   [(graph.node_ids[e.node], e.t, _num(e.magnitude)) for e in events])
        outputs.append(ev_path)
    batches = ca.sample_batches(ds, tr, cfg["batch"], cfg["repeats"], cfg["mode"], cfg["seed"],
                                events=events)
    outputs += ca.export_batches(batches, out / "batches")
    inputs = _prepared_inputs(args.data)
    if args.graph:
        inputs["graph"] = Path(args.graph)
    _manifest(out, "causal-extract", cfg, cfg["seed"], inputs, outputs, args)
    return EXIT_OK


def cmd_correlate(args) -> int:
    src = Path(args.batches)
    _require(src)
    files = sorted(src.glob("batch_*.csv")) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"no batch_*.csv files in {src}")
    batches = ca.read_batches(files)
    rel = ca.pearson_matrix(batches)
    out = _out_dir(args.out)
    pooled, mean_p, sum_p, rep = (out / "relation.csv", out / "relation_mean.csv",
                                  out / "relation_sum.csv", out / "report.json")
    ca.export_relation(rel, pooled)
    ca.export_relation(rel, mean_p, rel.c_mean)
    ca.export_relation(rel, sum_p, rel.c_sum if rel.c_sum is not None else rel.c)
    rows = np.concatenate([b.rows for b in batches])
    report = ca.neighbor_link_report(rel).to_dict()
    report.update({"rows": int(rows.shape[0]), "repeats": rel.repeats,
                   "flagged_columns": [ca.VARIABLE_NAMES[i] for i in rel.flagged],
                   "x_variation": ca.distribution_summary(rows[:, 0]).to_dict()})
    _dump(rep, report)
    _manifest(out, "correlate", {}, None, {f.name: f for f in files},
              [pooled, mean_p, sum_p, rep], args)
    return EXIT_OK


def _attention(model: GTCausIn, ds: dio.SpeedDataset, station: int, t: int) -> ly.AttentionScores:
    if model.config.variant == "NoCausIn":
        raise dio.DataError("a NoCausIn checkpoint has no attention layer")
    t_in = model.config.input_window
    if not 0 <= t <= ds.num_steps - t_in:
        raise UsageError(f"--t must lie in [0, {ds.num_steps - t_in}]")
    filled = dio.interpolate_training(ds)
    window = ds.normalize(filled.speeds[t:t + t_in]).T[None]            # (1, N, T)
    tokens = model.input_features(window)[0].reshape(ds.num_nodes, -1)
    bad = model.config.variant == "BadCausIn"
    return ly.extract_attention_scores(model.insight, tokens, None if bad else model.transitions,
                                       station, bad=bad, residual=model.config.attention_residual)


def _attention_rows(att: ly.AttentionScores):
    return [(q, lab, _num(s), _num(w)) for q, lab, s, w in att.rows()]


def cmd_inspect_attention(args) -> int:
    _require(args.checkpoint)
    model = GTCausIn.load(args.checkpoint)
    ds, _, _ = _load_prepared(args.data)
    _check_nodes(ds, model.graph)
    att = _attention(model, ds, _station(args.station, model.graph), args.t)
    out = _out_dir(args.out)
    path = out / "attention.csv"
    _write_csv(path, ["query", "token", "score", "weight"], _attention_rows(att))
    inputs = dict(_prepared_inputs(args.data), checkpoint=Path(args.checkpoint))
    _manifest(out, "inspect-attention", {"station": args.station, "t": args.t},
              model.config.seed, inputs, [path], args)
    return EXIT_OK


def _plot_prediction(args, out: Path):
    _require(args.checkpoint)
    model = GTCausIn.load(args.checkpoint)
    ds, _, _ = _load_prepared(args.data)
    _check_nodes(ds, model.graph)
    station = _station(args.station or "0", model.graph)
    h = args.horizon
    if not 1 <= h <= model.config.output_window:
        raise UsageError(f"--horizon must lie in [1, {model.config.output_window}]")
    ws = dio.window_set(ds, args.split, model.config.input_window, model.config.output_window)
    pred = _predict(model, ws)
    # one window per step: the h-step-ahead prediction of every shifted window
    rows = []
    for b, s in enumerate(ws.starts):
        step = int(s) + model.config.input_window + h - 1
        obs = bool(ws.target_mask[b, station, h - 1])
        rows.append((str(ds.timestamps[step]), _num(ws.targets[b, station, h - 1]) if obs else "",
                     _num(pred[b, station, h - 1]), int(obs)))
    path = out / "prediction_vs_truth.csv"
    _write_csv(path, ["timestamp", "truth", "prediction", "observed"], rows)
    inputs = dict(_prepared_inputs(args.data), checkpoint=Path(args.checkpoint))
    return {"station": station, "horizon": h, "split": args.split}, inputs, [path]


def _plot_circles(args, out: Path):
    _require(args.relation)
    rel = ca.import_relation(args.relation, kind="pearson" if args.pearson else "external_icd")
    names = ca.VARIABLE_NAMES
    rows = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            ri, si = divmod(i, len(ca.ROLES))[::-1]
            rj, sj = divmod(j, len(ca.ROLES))[::-1]
            rows.append((names[i], names[j], ca.ROLES[ri], si, ca.ROLES[rj], sj,
                         _num(rel.c[i, j]), _num(abs(rel.c[i, j]))))
    path = out / "correlation_circles.csv"
    _write_csv(path, ["var_a", "var_b", "role_a", "slice_a", "role_b", "slice_b", "value",
                      "abs_value"], rows)
    return {"kind": rel.kind}, {"relation": Path(args.relation)}, [path]


def _plot_heatmap(args, out: Path):
    _require(args.checkpoint)
    model = GTCausIn.load(args.checkpoint)
    ds, _, _ = _load_prepared(args.data)
    _check_nodes(ds, model.graph)
    att = _attention(model, ds, _station(args.station or "0", model.graph), args.t)
    path = out / "attention_heatmap.csv"
    _write_csv(path, ["query", *att.column_labels],
               [(q, *(_num(w) for w in att.weights[r])) for r, q in enumerate(att.row_labels)])
    inputs = dict(_prepared_inputs(args.data), checkpoint=Path(args.checkpoint))
    return {"station": att.station, "t": args.t}, inputs, [path]


def _plot_lsweep(args, out: Path):
    _require(args.ablation)
    doc = json.loads(Path(args.ablation).read_text())
    rows = []
    for row in doc["rows"]:
        for minutes, m in sorted(row["metrics"].items(), key=lambda kv: int(kv[0])):
            rows.append((row["variant"], row["num_blocks"], int(minutes), _num(m["mae"]),
                         _num(m["rmse"]), _num(m["mape"])))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    path = out / "l_sweep.csv"
    _write_csv(path, ["variant", "blocks", "horizon_min", "mae", "rmse", "mape"], rows)
    return {}, {"ablation": Path(args.ablation)}, [path]


PLOTS = {"prediction-vs-truth": _plot_prediction, "correlation-circles": _plot_circles,
         "attention-heatmap": _plot_heatmap, "l-sweep": _plot_lsweep}


def cmd_emit_plot(args) -> int:
    out = _out_dir(args.out)
    cfg, inputs, outputs = PLOTS[args.kind](args, out)
    _manifest(out, "emit-plot", dict(cfg, kind=args.kind), None, inputs, outputs, args)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args, dict(TRAIN_DEFAULTS, variants="CausIn,NoCausIn,BadCausIn",
                              blocks_list="4", seeds="0,1,2", split="test"))
    try:
        variants = [parse_variant(v) for v in cfg["variants"].split(",")]
        blocks = [int(b) for b in str(cfg["blocks_list"]).split(",")]
        seeds = [int(s) for s in str(cfg["seeds"]).split(",")]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds, graph, _ = _load_prepared(args.data)
    _check_nodes(ds, graph)
    configs = [ModelConfig(num_blocks=b, variant=v) for v in variants for b in blocks]
    table = ablation_run(configs, ds, graph, seeds, cfg["epochs"], _optim(cfg), cfg["split"],
                         cfg["batch_size"], cfg["patience"])
    out = _out_dir(args.out)
    path = out / "ablation.json"
    _dump(path, table)
    _manifest(out, "ablate", cfg, seeds, _prepared_inputs(args.data), [path], args)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings (flags take precedence)")
    common.add_argument("--record-time", action="store_true",
                        help="store wall-clock seconds in the manifest (breaks byte-identity)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gtcausin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a seeded synthetic dataset")
    s.add_argument("--kind", choices=("periodic", "planted", "benchmark", "variation"))
    s.add_argument("--nodes", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare-data", parents=[common], help="load, aggregate, split, build graph")
    s.add_argument("--speeds", required=True)
    s.add_argument("--distances", required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--kappa", type=float, required=True)
    s.add_argument("--keep-zeros", action="store_true", default=None,
                   help="treat literal 0 readings as observed")
    s.add_argument("--unit")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    def train_flags(s):
        s.add_argument("--data", required=True, help="directory written by prepare-data")
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--lr-start", type=int)
        s.add_argument("--lr-step", type=int)
        s.add_argument("--gamma", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--patience", type=int)
        s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train a model")
    train_flags(s)
    s.add_argument("--variant")
    s.add_argument("--blocks", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="masked metrics per horizon")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=dio.SPLITS, default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("causal-extract", parents=[common], help="sample causal-variable batches")
    s.add_argument("--data", required=True)
    s.add_argument("--graph")
    s.add_argument("--mode", choices=("random", "event"))
    s.add_argument("--batch", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_causal_extract)

    s = sub.add_parser("correlate", parents=[common], help="Pearson relation matrix of batches")
    s.add_argument("--batches", required=True, help="batch CSV or directory of batch_*.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("inspect-attention", parents=[common], help="attention weights of a station")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--station", required=True, help="sensor id or index")
    s.add_argument("--t", type=int, required=True, help="first input step of the window")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect_attention)

    s = sub.add_parser("emit-plot", parents=[common], help="write plot-ready CSV data")
    s.add_argument("--kind", required=True, choices=sorted(PLOTS))
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--station")
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--split", choices=dio.SPLITS, default="test")
    s.add_argument("--horizon", type=int, default=12)
    s.add_argument("--relation")
    s.add_argument("--pearson", action="store_true", help="the relation CSV is a Pearson matrix")
    s.add_argument("--ablation")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_emit_plot)

    s = sub.add_parser("ablate", parents=[common], help="train variants x blocks x seeds")
    train_flags(s)
    s.add_argument("--variants", help="comma-separated variants")
    s.add_argument("--blocks-list", help="comma-separated block counts")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--split", choices=dio.SPLITS)
    s.set_defaults(func=cmd_ablate)
    return p


DATA_ERRORS = (dio.DataError, GraphError, ca.CausalInputError, ca.SampleRejected, MetricError,
               ShapeError, KeyError, json.JSONDecodeError, OSError)
NUMERIC_ERRORS = (NonFiniteError, DivergenceError, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._t0 = time.perf_counter()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
