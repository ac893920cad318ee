import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtcausin import model as md
from gtcausin import numcore as nc
from gtcausin import synthetic as sy
from gtcausin import train as tr
from gtcausin.data import window_set


# ---------------------------------------------------------------- metrics

def test_metric_example():
    truth, pred, mask = np.array([60.0, 0.0]), np.array([63.0, 99.0]), np.array([True, False])
    assert tr.masked_mae(pred, truth, mask) == 3.0
    assert tr.masked_rmse(pred, truth, mask) == 3.0
    assert tr.masked_mape(pred, truth, mask) == pytest.approx(0.05, abs=1e-12)


def brute(pred, truth, mask):
    ae, se, pe = [], [], []
    for p, t, m in zip(pred.ravel(), truth.ravel(), mask.ravel()):
        if m:
            ae.append(abs(t - p))
            se.append((t - p) ** 2)
            if t != 0:
                pe.append(abs((t - p) / t))
    return sum(ae) / len(ae), (sum(se) / len(se)) ** 0.5, sum(pe) / len(pe)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60))
def test_metrics_match_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    truth, pred = rng.uniform(5, 80, n), rng.uniform(0, 90, n)
    mask = rng.random(n) < 0.7
    mask[0] = True
    mae, rmse, mape = brute(pred, truth, mask)
    assert abs(tr.masked_mae(pred, truth, mask) - mae) <= 1e-12 * max(1, mae)
    assert abs(tr.masked_rmse(pred, truth, mask) - rmse) <= 1e-12 * max(1, rmse)
    assert abs(tr.masked_mape(pred, truth, mask) - mape) <= 1e-12 * max(1, mape)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_entries_do_not_matter(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.uniform(5, 80, (4, 6)), rng.uniform(0, 90, (4, 6))
    mask = rng.random((4, 6)) < 0.5
    mask[0, 0] = True
    junk_t, junk_p = truth.copy(), pred.copy()
    junk_t[~mask] = rng.normal(0, 1e6, (~mask).sum())
    junk_p[~mask] = np.inf
    for f in (tr.masked_mae, tr.masked_rmse, tr.masked_mape):
        assert f(pred, truth, mask) == f(junk_p, junk_t, mask)


def test_mape_skips_zero_truth():
    mape, skipped = tr.masked_mape_counted([1.0, 5.0], [0.0, 10.0], [True, True])
    assert (mape, skipped) == (0.5, 1)
    with pytest.raises(tr.MetricError):
        tr.masked_mape([1.0], [0.0], [True])


def test_metric_errors():
    with pytest.raises(tr.MetricError):
        tr.masked_mae([1.0], [1.0], [False])
    with pytest.raises(tr.MetricError):
        tr.masked_mae([1.0, 2.0], [1.0], [True])
    with pytest.raises(tr.MetricError):
        tr.improvement(0.0, 1.0)


def test_improvement_example():
    assert tr.improvement(3.18, 3.06) == pytest.approx(0.0377, abs=5e-5)
    assert round(100 * tr.improvement(3.18, 3.06), 1) == 3.8
    assert tr.improvement(2.0, 2.0) == 0.0


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def small():
    g = sy.ring_road_graph(5, 0)
    return g, sy.periodic_dataset(g, 400, 0)


def fresh(g, ds, variant="CausIn", seed=0, blocks=2):
    return md.build(md.ModelConfig(variant=variant, seed=seed, num_blocks=blocks), g,
                    norm_stats=ds.norm_stats)


def test_zero_epochs_returns_initial_params(small):
    g, ds = small
    m = fresh(g, ds)
    init = m.params.snapshot()
    res = tr.train(m, ds, 0)
    assert res.curve == [] and all(np.array_equal(init[k], v) for k, v in res.best_params.items())


def test_training_is_deterministic(small):
    g, ds = small
    a = tr.train(fresh(g, ds), ds, 2, seed=3, batch_size=32)
    b = tr.train(fresh(g, ds), ds, 2, seed=3, batch_size=32)
    assert a.curve == b.curve
    assert all(a.best_params[k].tobytes() == b.best_params[k].tobytes() for k in a.best_params)


def test_training_loss_decreases(small):
    g, ds = small
    res = tr.train(fresh(g, ds), ds, 5, nc.OptimState(base_lr=0.004), batch_size=32,
                   patience=100)
    maes = [r["train_mae"] for r in res.curve]
    assert len(maes) == 5 and maes[-1] < maes[0]
    assert [r["epoch"] for r in res.curve] == list(range(5))


def test_stop_below_returns_early(small):
    g, ds = small
    res = tr.train(fresh(g, ds), ds, 5, stop_below=1e9)
    assert len(res.curve) == 1 and res.best_epoch == 0


def test_schedule_advances_per_epoch(small):
    g, ds = small
    opt = nc.OptimState(base_lr=0.01, decay_start_step=1, decay_step_size=1, decay_gamma=0.5)
    res = tr.train(fresh(g, ds), ds, 3, opt, batch_size=64, patience=100)
    assert [r["lr"] for r in res.curve] == [0.01, 0.005, 0.0025]


def test_loss_is_masked_mae(small):
    g, ds = small
    m = fresh(g, ds)
    ws = window_set(ds, "train").take(slice(0, 8))
    ws.target_mask[0, 1, :4] = False
    pred = m.forward_tensor(ws.inputs, ws.calendar).data[:, :, 0, :]
    assert float(tr.batch_loss(m, ws).data) == pytest.approx(
        tr.masked_mae(pred, ws.targets, ws.target_mask), rel=1e-12)


def test_evaluate_horizons(small):
    g, ds = small
    m = fresh(g, ds)
    rep = tr.evaluate(m, ds, "test", seed=1)
    assert set(rep.horizons) == {15, 30, 60}
    n_win = len(window_set(ds, "test"))
    assert all(h.count == n_win * 5 for h in rep.horizons.values())
    d = rep.to_dict()
    assert list(d["horizons"]) == ["15", "30", "60"] and d["seed"] == 1


def test_evaluate_rejects_stats_mismatch(small):
    g, ds = small
    m = md.build(md.ModelConfig(), g, norm_stats=(0.0, 1.0))
    with pytest.raises(ValueError):
        tr.evaluate(m, ds)


def test_ablation_identical_configs(small):
    g, ds = small
    cfg = md.ModelConfig(variant="NoCausIn", num_blocks=2)
    out = tr.ablation_run([cfg, cfg], ds, g, [0], epochs=1, batch_size=64)
    assert [r["label"] for r in out["rows"]] == ["NoCausIn(L=2)", "NoCausIn(L=2)"]
    for imp in out["improvements"]:
        for h in imp["horizons"].values():
            assert h == {"mae": 0.0, "rmse": 0.0, "mape": 0.0}


def test_ablation_block_sweep_rows(small):
    g, ds = small
    cfgs = [md.ModelConfig(variant="CausIn", num_blocks=L) for L in (1, 2)]
    out = tr.ablation_run(cfgs, ds, g, [0, 1], epochs=1, batch_size=64)
    assert [r["num_blocks"] for r in out["rows"]] == [1, 2]
    assert all(r["seeds"] == [0, 1] and len(r["per_seed"]) == 2 for r in out["rows"])
    assert len(out["improvements"]) == 2
