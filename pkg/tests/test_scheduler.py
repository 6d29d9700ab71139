import numpy as np
import pytest

from conftest import random_model
from filter_attenuation.criteria import filter_l1
from filter_attenuation.data import gen_synthetic
from filter_attenuation.masking import (
    PruneConfig,
    apply_attenuation,
    prune_filters,
    pruned_filters,
)
from filter_attenuation.nn import (
    FilterStatus,
    TrainConfig,
    build_desk_model,
    models_equal,
    train_epochs,
)
from filter_attenuation.scheduler import (
    ExperimentLog,
    WarmupError,
    compact_model,
    next_layer_impact,
    run_attenuation_pruning,
    run_hard_pruning,
)


@pytest.fixture(scope="module")
def tiny():
    ds = gen_synthetic(3, 30, 8, seed=0, noise=0.1, jitter=1)
    train, val, test = ds.split((0.6, 0.2, 0.2), seed=0)
    model = build_desk_model((1, 8, 8), 3, seed=0, channels=(4, 6))
    return model, train, val, test


def quick_config(**kw):
    base = dict(a=1, t2=0.2, t1=1.0, warmup_epochs=3, warmup_max_epochs=3, finetune_epochs=1,
                max_rounds=25, target_prune_fraction=0.5)
    base.update(kw)
    return PruneConfig(**base)


class TestNullSchedule:
    @pytest.mark.parametrize("method", ["attenuate", "hard"])
    def test_equals_plain_finetuning(self, tiny, method):
        model, train, val, _ = tiny
        cfg = quick_config(a=0, k0=0, max_rounds=2, t2=1e-6, warmup_epochs=1,
                           warmup_max_epochs=1)
        tc = TrainConfig(0.05, 16, 1, 11)
        final, xlog = run_attenuation_pruning(model, train, val, cfg, tc, method=method)
        assert all(r["selected"] == [] and r["pruned"] == [] for r in xlog.rounds)
        assert all(r["extra_finetune"] for r in xlog.rounds)
        plain = model.copy()
        # warm-up 1 epoch + 2 rounds x (fine-tune + extra fine-tune)
        train_epochs(plain, train, tc, np.random.default_rng(11), epochs=5)
        assert models_equal(final, plain)
        assert xlog.summary["final_pruned"] == 0
        assert all(s["attenuation_count"] == 0 for s in xlog.summary["final_filters"])

    def test_input_model_untouched(self, tiny):
        model, train, val, _ = tiny
        before = model.copy()
        run_attenuation_pruning(model, train, val, quick_config(max_rounds=2),
                                TrainConfig(0.05, 16, 1, 0))
        assert models_equal(model, before)


class TestScheduleInvariants:
    @pytest.fixture(scope="class")
    @staticmethod
    def runs(tiny):
        model, train, val, test = tiny
        out = {}
        for method in ("attenuate", "hard"):
            out[method] = run_attenuation_pruning(model, train, val, quick_config(),
                                                  TrainConfig(0.05, 16, 1, 3), test, method)
        return out

    @pytest.mark.parametrize("method", ["attenuate", "hard"])
    def test_k_increments_by_a(self, runs, method):
        ks = [r["k"] for r in runs[method][1].rounds]
        assert ks == list(range(1, len(ks) + 1))

    @pytest.mark.parametrize("method", ["attenuate", "hard"])
    def test_log_consistency(self, runs, method):
        final, xlog = runs[method]
        net = sum(len(r["pruned"]) - len(r["rolled_back"]) for r in xlog.rounds)
        assert net == xlog.summary["final_pruned"] == len(pruned_filters(final))
        _, report = compact_model(final)
        assert report.removed_filters == net
        assert xlog.summary["compaction"]["params_after"] == report.params_after
        prev = 0
        for r in xlog.rounds:
            assert r["cumulative_pruned"] == prev + len(r["pruned"]) - len(r["rolled_back"])
            assert min(r["remaining_per_layer"]) >= 1
            prev = r["cumulative_pruned"]

    def test_termination_is_recorded(self, runs):
        for _, xlog in runs.values():
            s = xlog.summary
            reached = s["final_pruned"] >= s["target_count"]
            assert (s["termination"] == "target_reached") == reached
            assert s["rounds"] == len(xlog.rounds)

    def test_hard_stops_exactly_at_target(self, runs):
        s = runs["hard"][1].summary
        assert s["final_pruned"] == s["target_count"] == 5

    def test_pruned_filters_are_zero(self, runs):
        for final, _ in runs.values():
            for conv in final.conv_layers():
                for fi, s in enumerate(conv.states):
                    if s.status == FilterStatus.PRUNED:
                        assert not conv.weights[fi].any() and conv.bias[fi] == 0

    def test_hard_never_attenuates(self, runs):
        _, xlog = runs["hard"]
        assert all(f["attenuation_count"] == 0 for f in xlog.summary["final_filters"])
        assert all(r["recovered"] == [] for r in xlog.rounds)

    def test_selected_filters_were_unpruned(self, runs):
        _, xlog = runs["attenuate"]
        pruned = set()
        for r in xlog.rounds:
            assert not pruned & {tuple(p) for p in r["selected"]}
            pruned |= {tuple(p) for p in r["pruned"]}

    def test_log_roundtrip(self, runs):
        _, xlog = runs["attenuate"]
        text = xlog.to_jsonl()
        assert ExperimentLog.from_jsonl(text).to_jsonl() == text
        assert text.count("\n") == len(xlog.rounds) + 1


def test_attenuation_preserves_ranking_of_unselected():
    rng = np.random.default_rng(0)
    for seed in range(20):
        m = random_model(np.random.default_rng(seed))
        before = [filter_l1(c).values for c in m.conv_layers()]
        sel = {(0, int(rng.integers(4))), (1, int(rng.integers(5)))}
        apply_attenuation(m, sel, 0.8)
        for li, conv in enumerate(m.conv_layers()):
            after = filter_l1(conv).values
            keep = [fi for fi in range(conv.out_channels) if (li, fi) not in sel]
            assert list(np.argsort(before[li][keep], kind="stable")) == list(
                np.argsort(after[keep], kind="stable"))
            for fi in range(conv.out_channels):
                if (li, fi) in sel:
                    assert after[fi] == pytest.approx(0.8 * before[li][fi], rel=1e-12)


def test_warmup_floor_aborts(tiny):
    model, train, val, _ = tiny
    cfg = quick_config(warmup_epochs=0, warmup_max_epochs=1, warmup_floor=1.01)
    with pytest.raises(WarmupError, match="floor"):
        run_attenuation_pruning(model, train, val, cfg, TrainConfig(0.05, 16, 1, 0))


def test_hard_full_target_respects_guard(tiny):
    model, train, val, _ = tiny
    final, xlog = run_hard_pruning(model, train, val, quick_config(target_prune_fraction=1.0,
                                                                   max_rounds=6),
                                   TrainConfig(0.05, 16, 1, 0))
    assert all(n == 1 for n in xlog.rounds[-1]["remaining_per_layer"])
    assert xlog.summary["termination"] == "max_rounds"


def test_gradient_mode_leaves_weights_unscaled(tiny):
    model, train, val, _ = tiny
    cfg = quick_config(attenuation_mode="gradient", max_rounds=3)
    _, xlog = run_attenuation_pruning(model, train, val, cfg, TrainConfig(0.05, 16, 1, 0))
    first = xlog.rounds[0]
    assert first["selected"]
    counts = {(f["layer"], f["filter"]): f["attenuation_count"] for f in first["filters"]}
    assert all(counts[tuple(p)] == 1 for p in first["selected"])


# ---------------------------------------------------------------------------
# next-layer impact
# ---------------------------------------------------------------------------


def ablation_impact(model, layer_index, filters, x):
    """L1 change of the next conv's pre-activation when ``filters`` are zeroed."""
    next_pos = model.conv_positions()[layer_index + 1]

    def pre_activation(m):
        h = x
        for layer in m.layers[:next_pos + 1]:
            h = layer.forward(h)
        return h

    ablated = model.copy()
    conv = ablated.conv_layers()[layer_index]
    for fi in filters:
        conv.weights[fi] = 0
        conv.bias[fi] = 0
    return float(np.abs(pre_activation(model) - pre_activation(ablated)).sum() / len(x))


class TestNextLayerImpact:
    def test_empty(self):
        m = random_model(np.random.default_rng(0))
        assert next_layer_impact(m, 0, set(), np.ones((2, 2, 8, 8))) == 0.0

    def test_zero_filter(self):
        m = random_model(np.random.default_rng(0))
        m.conv_layers()[0].weights[1] = 0
        m.conv_layers()[0].bias[1] = 0
        x = np.random.default_rng(1).normal(size=(3, 2, 8, 8))
        assert next_layer_impact(m, 0, {1}, x) == 0.0

    def test_last_layer_errors(self):
        m = random_model(np.random.default_rng(0))
        with pytest.raises(ValueError, match="last conv"):
            next_layer_impact(m, 1, {0}, np.ones((1, 2, 8, 8)))

    def test_mixed_layers_rejected(self):
        m = random_model(np.random.default_rng(0))
        with pytest.raises(ValueError):
            next_layer_impact(m, 0, {(0, 1), (1, 1)}, np.ones((1, 2, 8, 8)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_ablation(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, channels=(4, 5, 3))
        x = rng.normal(size=(4, 2, 8, 8))
        for li in (0, 1):
            n = m.conv_layers()[li].out_channels
            for subset in ({0}, {n - 1}, set(range(n))):
                got = next_layer_impact(m, li, subset, x)
                assert got == pytest.approx(ablation_impact(m, li, subset, x), rel=1e-9)


# ---------------------------------------------------------------------------
# compaction
# ---------------------------------------------------------------------------


class TestCompaction:
    def test_no_pruning(self):
        m = random_model(np.random.default_rng(0))
        c, report = compact_model(m)
        assert models_equal(c, m)
        assert report.params_after == m.parameter_count() and report.removed_filters == 0

    def test_one_filter_in_first_layer(self):
        m = random_model(np.random.default_rng(0))
        prune_filters(m, {(0, 2)})
        c, report = compact_model(m)
        a, b = m.conv_layers(), c.conv_layers()
        assert b[0].weights.size == a[0].weights.size * 3 // 4
        assert b[1].in_channels == a[1].in_channels - 1
        assert report.filters_after == [3, 5]

    def test_last_conv_drops_dense_columns(self):
        rng = np.random.default_rng(3)
        m = random_model(rng)
        prune_filters(m, {(1, 0), (1, 3)})
        c, _ = compact_model(m)
        # last conv output is 5 x 2 x 2 -> flatten 20; two channels removed -> 12 columns
        assert c.layers[-1].weights.shape == (3, 12)
        x = rng.normal(size=(10, 2, 8, 8))
        np.testing.assert_allclose(c.forward(x), m.forward(x), atol=1e-12)

    def test_parameter_accounting(self):
        m = random_model(np.random.default_rng(4))
        prune_filters(m, {(0, 1), (1, 2)})
        _, report = compact_model(m)
        # conv0: 3x2x9+3, conv1: 4x3x9+4, dense: 3 x (4*2*2) + 3
        assert report.params_after == (54 + 3) + (108 + 4) + (48 + 3)
