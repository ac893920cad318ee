import numpy as np
import pytest

from gtcausin import model as md
from gtcausin import numcore as nc
from gtcausin.data import Calendar
from gtcausin.graph import SensorGraph
from gtcausin.numcore import Tensor

from conftest import random_graph


def calendar(b, n, rng):
    return Calendar(rng.integers(0, 7, b), rng.integers(0, 12, b), rng.uniform(40, 60, (b, n)),
                    np.array(["2017-01-02T00:00:00"] * b, dtype="datetime64[s]"))


def make(variant="CausIn", n=4, seed=0, norm=(0.0, 1.0), **kw):
    g = random_graph(n, np.random.default_rng(seed + 100))
    return md.build(md.ModelConfig(variant=variant, seed=seed, **kw), g, norm_stats=norm)


def zero_params(model):
    for _, t in model.params.items():
        t.data = np.zeros_like(t.data)


def test_parse_variant_aliases():
    assert md.parse_variant("gt-causin") == "CausIn"
    assert md.parse_variant("GT-NoCausIn") == "NoCausIn"
    assert md.parse_variant("BadCausIn") == "BadCausIn"
    with pytest.raises(ValueError):
        md.parse_variant("causal")


@pytest.mark.parametrize("kw", [{"num_blocks": 0}, {"eval_horizons": (0, 3)},
                                {"eval_horizons": (13,)}, {"block_width": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        md.ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = md.ModelConfig(variant="gt-badcausin", num_blocks=3)
    assert md.ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == md.ModelConfig.from_dict(cfg.to_dict()).digest()


def test_nocausin_has_no_insight_parameters():
    m = make("NoCausIn")
    assert not any("causal_insight" in name for name in m.params.names())
    assert any("causal_insight" in name for name in make("CausIn").params.names())


def test_parameter_tree():
    names = make(num_blocks=4).params.names()
    for l in range(4):
        assert f"block{l}/diffusion/theta" in names and f"block{l}/tcn/theta" in names
    assert "post_block0/dense1/weight" in names and "inherent/fuse2/bias" in names


def test_merged_width_is_blocks_times_width(rng):
    m = make(num_blocks=4, block_width=8)
    feats = Tensor(m.input_features(rng.normal(size=(2, 4, 12))))
    merged, skips = m.blocks_forward(feats)
    assert len(skips) == 4 and merged.shape == (2, 4, 12, 32)


def test_dilation_schedule():
    m = make(num_blocks=4)
    assert [m.block_params(l)[1].dilation for l in range(4)] == [1, 2, 4, 8]


def test_same_seed_same_checkpoint(tmp_path):
    make(seed=3).save(tmp_path / "a.json")
    make(seed=3).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    make(seed=4).save(tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


def test_checkpoint_round_trip_predictions(tmp_path, rng):
    m = make(norm=(55.0, 7.0))
    m.save(tmp_path / "m.json")
    back = md.GTCausIn.load(tmp_path / "m.json")
    win, cal = rng.normal(size=(3, 4, 12)), calendar(3, 4, rng)
    assert back.norm_stats == (55.0, 7.0) and back.config == m.config
    assert back.predict(win, cal).values.tobytes() == m.predict(win, cal).values.tobytes()


def test_zero_params_zero_window_gives_zero_normalized_output(rng):
    m = make(norm=(50.0, 10.0))
    zero_params(m)
    out = m.predict(np.zeros((1, 4, 12)), calendar(1, 4, rng)).values
    np.testing.assert_array_equal(out, np.full((1, 4, 1, 12), 50.0))


def test_output_shape_and_horizons(rng):
    m = make(n=5)
    fc = m.predict(rng.normal(size=(2, 5, 12)), calendar(2, 5, rng))
    assert fc.values.shape == (2, 5, 1, 12)
    assert fc.at(12).shape == (2, 5, 1)
    np.testing.assert_array_equal(fc.at(3), fc.values[..., 2])
    single = m.predict(rng.normal(size=(1, 5, 1, 12)), calendar(1, 5, rng))
    assert single.values.shape == (1, 5, 1, 12)


@pytest.mark.parametrize("variant", md.VARIANTS)
def test_last_input_step_reaches_output(variant, rng):
    m = make(variant)
    win, cal = rng.normal(size=(1, 4, 12)), calendar(1, 4, rng)
    base = m.predict(win, cal).values
    win2 = win.copy()
    win2[:, :, -1] += 1.0
    assert not np.allclose(m.predict(win2, cal).values, base)


def test_nan_window_rejected(rng):
    m = make()
    win = rng.normal(size=(1, 4, 12))
    win[0, 1, 3] = np.nan
    with pytest.raises(ValueError):
        m.predict(win, calendar(1, 4, rng))
    with pytest.raises(ValueError):
        m.predict(rng.normal(size=(1, 4, 11)), calendar(1, 4, rng))


def test_bad_variant_parameter_count_matches():
    assert make("BadCausIn").params.num_values() == make("CausIn").params.num_values()
    assert make("BadCausIn").params.names() == make("CausIn").params.names()


def test_bad_causal_forward_requires_variant(rng):
    with pytest.raises(ValueError):
        md.bad_causal_forward(make("CausIn"), rng.normal(size=(1, 4, 12)), calendar(1, 4, rng))


def test_bad_variant_zero_weights_zero_output(rng):
    m = make("BadCausIn")
    zero_params(m)
    out = md.bad_causal_forward(m, rng.normal(size=(2, 4, 12)), calendar(2, 4, rng)).values
    np.testing.assert_array_equal(out, 0.0)


def two_cycle_pair():
    g = SensorGraph(np.array([[1.0, 0.6], [0.6, 1.0]]), ["a", "b"])
    cfg = md.ModelConfig(variant="CausIn", seed=5)
    good = md.build(cfg, g)
    bad = md.build(md.ModelConfig(variant="BadCausIn", seed=5), g)
    bad.params.load(good.params.snapshot())
    return good, bad


def test_two_cycle_variants_agree_on_node_constant_signal(rng):
    good, bad = two_cycle_pair()
    row = rng.normal(size=12)
    win = np.stack([row, row])[None]
    cal = calendar(1, 2, rng)
    np.testing.assert_allclose(good.predict(win, cal).values, bad.predict(win, cal).values,
                               atol=1e-12)


def test_two_cycle_variants_differ_on_distinct_signals(rng):
    good, bad = two_cycle_pair()
    win, cal = rng.normal(size=(1, 2, 12)), calendar(1, 2, rng)
    assert not np.allclose(good.predict(win, cal).values, bad.predict(win, cal).values)


def test_nocausin_equals_causin_with_identity_insight(rng):
    causin = make("CausIn", seed=2)
    nocausin = make("NoCausIn", seed=2)
    shared = {k: v for k, v in causin.params.snapshot().items() if "causal_insight" not in k}
    nocausin.params.load(shared)
    win, cal = rng.normal(size=(2, 4, 12)), calendar(2, 4, rng)
    a = causin.forward_tensor(win, cal, insight=lambda x: x).data
    b = nocausin.forward_tensor(win, cal).data
    assert a.tobytes() == b.tobytes()


def test_every_skip_contributes(rng):
    m = make(num_blocks=4)
    win, cal = rng.normal(size=(1, 4, 12)), calendar(1, 4, rng)
    base = m.forward_tensor(win, cal).data
    for drop in range(4):
        def without(skips, drop=drop):
            return [nc.scale(s, 0.0) if i == drop else s for i, s in enumerate(skips)]
        assert not np.allclose(m.forward_tensor(win, cal, skip_filter=without).data, base)


def test_gt_stack_is_temporally_causal(rng):
    m = make("NoCausIn")
    x = rng.normal(size=(1, 4, 12))
    for t2 in range(12):
        y = x.copy()
        y[0, :, t2] += 3.0
        a = m.blocks_forward(m.apply_insight(Tensor(m.input_features(x))))[1]
        b = m.blocks_forward(m.apply_insight(Tensor(m.input_features(y))))[1]
        for sa, sb in zip(a, b):
            assert sa.data[:, :, :t2].tobytes() == sb.data[:, :, :t2].tobytes()


@pytest.mark.parametrize("variant", md.VARIANTS)
def test_full_model_gradient(variant):
    rng = np.random.default_rng(11)
    m = make(variant, seed=11)
    win, cal = rng.normal(size=(2, 4, 12)), calendar(2, 4, rng)
    w = rng.normal(size=(2, 4, 1, 12)) / 10

    def loss():
        return nc.total(nc.mul(m.forward_tensor(win, cal), w))
    stats = {}
    assert nc.grad_check_params(loss, m.params, rng, per_param=4, epsilon=1e-5, stats=stats) < 1e-4
    assert stats["checked"] > 0.9 * (stats["checked"] + stats["skipped"])


def test_kink_guard_skips_straddled_relu():
    ps = nc.ParamStore()
    ps.add("p", np.array([1e-7]))
    stats = {}
    worst = nc.grad_check_params(lambda: nc.total(nc.relu(ps["p"])), ps,
                                 np.random.default_rng(0), epsilon=1e-5, stats=stats)
    assert stats == {"checked": 0, "skipped": 1} and worst == 0.0
    unguarded = nc.grad_check_params(lambda: nc.total(nc.relu(ps["p"])), ps,
                                     np.random.default_rng(0), epsilon=1e-5, skip_kinks=False)
    assert unguarded > 0.1
