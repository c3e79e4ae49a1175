import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclmia.attacks.active import (
    PRESETS,
    AscentConfig,
    AscentDiverged,
    InTrainingAttack,
    StaticResult,
    ascend,
    gradient_ascent,
    static_attack,
    threshold_accuracy,
    threshold_sweep,
)
from fclmia.contrastive import ParamVector, init_state, symmetric_loss
from fclmia.contrastive.moco import sgd_step
from fclmia.datasets import AugmentationPolicy, augment, partition_noniid
from fclmia.federation import AttackerHook, FederationConfig, run_federation
from fclmia.rng import stream


def quad(params, step):
    w = params["w"]
    return float(np.sum(w**2)), ParamVector({"w": 2 * w})


def test_toy_quadratic_step():
    p, losses = ascend(ParamVector({"w": np.array([1.0])}), quad, 0.1, 1)
    assert p["w"][0] == pytest.approx(1.2, abs=1e-12)
    assert losses == pytest.approx([1.0, 1.44], abs=1e-12)


def test_zero_rate_leaves_params_unchanged():
    p0 = ParamVector({"w": np.array([0.7, -0.3])})
    p, losses = ascend(p0, quad, 0.0, 5)
    np.testing.assert_array_equal(p["w"], p0["w"])
    assert len(losses) == 6 and len(set(losses)) == 1


def test_divergence_guard():
    with pytest.raises(AscentDiverged) as exc:
        ascend(ParamVector({"w": np.array([1.0])}), quad, 10.0, 3)
    assert exc.value.trace[0] == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        AscentConfig(steps=0)
    with pytest.raises(ValueError):
        AscentConfig(lr=-0.1)
    assert (PRESETS["mild"].steps, PRESETS["mild"].lr) == (3, 0.05)
    assert (PRESETS["strong"].steps, PRESETS["strong"].lr) == (10, 0.1)


@pytest.fixture
def state(tiny_arch):
    return init_state(tiny_arch, np.random.default_rng(0), queue_size=16)


def test_ascent_step_equals_descent_on_negated_loss(state, tiny_pools):
    x = tiny_pools[0].pixels[:6]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cfg = AscentConfig(steps=1, lr=0.05)
        up, trace = gradient_ascent(state, x, cfg, np.random.default_rng(seed))
        v1 = augment(x, AugmentationPolicy(), rng)
        v2 = augment(x, AugmentationPolicy(), rng)
        _, grads, _ = symmetric_loss(state, v1, v2)
        down = sgd_step(state.query, -grads, cfg.lr)
        for k in down:
            np.testing.assert_allclose(up.query[k], down[k], rtol=0, atol=1e-9)
        assert len(trace.steps) == 2


def test_gradient_ascent_keeps_key_and_queue(state, tiny_pools):
    new, trace = gradient_ascent(state, tiny_pools[0].pixels[:4], AscentConfig(steps=3, lr=0.05), np.random.default_rng(1))
    assert new.key.checksum() == state.key.checksum()
    np.testing.assert_array_equal(new.queue, state.queue)
    assert new.query.checksum() != state.query.checksum()
    assert len(trace.steps) == 4 and np.all(np.isfinite(trace.steps))
    with pytest.raises(ValueError):
        gradient_ascent(state, tiny_pools[0].pixels[:0], AscentConfig(), np.random.default_rng(1))


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------

def test_separated_threshold():
    d, y = [0.1, 0.2, 0.9, 1.0], [1, 1, 0, 0]
    assert threshold_accuracy(d, y, 0.5) == 1.0
    t, acc, _ = threshold_sweep(d, y)
    assert acc == 1.0 and 0.2 < t < 0.9
    assert threshold_accuracy(d, y, 0.0) == 0.5


def test_threshold_below_all_gives_zero_recall():
    from fclmia.evaluation import metrics

    d, y = np.array([0.1, 0.2, 0.9, 1.0]), np.array([1, 1, 0, 0])
    m = metrics((d <= 0.05).astype(int), y)
    assert m.recall == 0.0


def test_equal_deltas_are_indistinguishable():
    t, acc, curve = threshold_sweep([0.4, 0.4], [1, 0])
    assert acc == 0.5 and t == 0.4 and len(curve) == 1


def test_sweep_errors():
    with pytest.raises(ValueError):
        threshold_sweep([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        threshold_sweep([0.1], [1, 0])


def brute_force_sweep(deltas, labels):
    uniq = sorted(set(deltas))
    cands = [(a + b) / 2 for a, b in zip(uniq, uniq[1:])] or uniq
    best = None
    for t in cands:
        mem = [d <= t for d, y in zip(deltas, labels) if y == 1]
        non = [d > t for d, y in zip(deltas, labels) if y == 0]
        acc = 0.5 * (sum(mem) / len(mem) + sum(non) / len(non))
        if best is None or acc > best[1]:
            best = (t, acc)
    return best


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=40))
@settings(max_examples=200, deadline=None)
def test_sweep_matches_brute_force(pairs):
    deltas = [d / 7 for d, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    t, acc, _ = threshold_sweep(deltas, labels)
    bt, bacc = brute_force_sweep(deltas, labels)
    assert acc == bacc and t == bt


def test_interleaved_sweep_matches_brute_force():
    d = np.arange(20) / 10
    y = np.tile([1, 0], 10)
    t, acc, _ = threshold_sweep(d, y)
    assert (t, acc) == brute_force_sweep(d.tolist(), y.tolist())


# ---------------------------------------------------------------------------
# Static attack
# ---------------------------------------------------------------------------

def test_static_attack_runs_on_copies(state, tiny_pools):
    train, hold = tiny_pools
    before = state.checksum()
    cfg = AscentConfig(steps=2, lr=0.05)
    res = static_attack(state, train.pixels[:4], train.ids[:4], hold.pixels[:4], hold.ids[:4], cfg, eval_draws=1)
    assert state.checksum() == before
    assert res.deltas.shape == (8,)
    assert 0 <= res.report["accuracy"] <= 1
    again = static_attack(state, train.pixels[:4], train.ids[:4], hold.pixels[:4], hold.ids[:4], cfg, eval_draws=1)
    np.testing.assert_array_equal(res.deltas, again.deltas)
    with pytest.raises(ValueError):
        static_attack(state, train.pixels[:2], train.ids[:2], hold.pixels[:2], hold.ids[:2], cfg, threshold=np.nan)


def test_static_batches_are_independent(state, tiny_pools):
    train, hold = tiny_pools
    cfg = AscentConfig(steps=2, lr=0.05)
    full = static_attack(state, train.pixels[:3], train.ids[:3], hold.pixels[:3], hold.ids[:3], cfg, eval_draws=1)
    part = static_attack(state, train.pixels[1:3], train.ids[1:3], hold.pixels[1:3], hold.ids[1:3], cfg, eval_draws=1)
    np.testing.assert_allclose(full.deltas[[1, 2, 4, 5]], part.deltas)


def test_static_csv(tmp_path):
    r = StaticResult(np.array([3, 4]), np.array([1, 0]), np.array([1.0, 1.0]), np.array([1.5, 2.0]))
    r.write_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["sample_id", "label", "loss_before", "loss_after", "delta"]
    assert float(rows[2][-1]) == 1.0


# ---------------------------------------------------------------------------
# In-training attack
# ---------------------------------------------------------------------------

@pytest.fixture
def small_fed(tiny_arch, tiny_pools):
    train, _ = tiny_pools
    parts = partition_noniid(train, 2, 0.5, 0)
    cfg = FederationConfig(n_clients=2, clients_per_round=1, rounds=4, local_epochs=1, batch_size=8, queue_size=16,
                           checkpoint_every=10, arch=tiny_arch)
    return cfg, [train.take(p.sample_ids) for p in parts], parts


def test_noop_hook_matches_clean_run(small_fed):
    cfg, data, _ = small_fed
    clean, _ = run_federation(cfg, data)
    hooked, _ = run_federation(cfg, data, hook=AttackerHook(0))
    assert clean.global_params.checksum() == hooked.global_params.checksum()


def _attack(small_fed, tiny_pools, **kw):
    cfg, data, parts = small_fed
    train, hold = tiny_pools
    own = parts[0].sample_ids
    return InTrainingAttack(0, hold.pixels[:3], hold.ids[:3], train.take(own[:3]), own[:3],
                            AscentConfig(steps=2, lr=0.05), target_labels=[0, 0, 0], eval_draws=1, **kw)


def test_in_training_records_and_skips(small_fed, tiny_pools, tmp_path):
    cfg, data, _ = small_fed
    hook = _attack(small_fed, tiny_pools)
    run_federation(cfg, data, hook=hook)
    selected = sorted(hook.rounds())
    assert sorted(selected + hook.skipped_rounds) == [1, 2, 3, 4]
    sel = [t for t in range(1, 5) if 0 in sorted(int(c) for c in stream(cfg.seed, "select", t).choice(2, 1, replace=False))]
    assert selected == sel
    assert len(hook.records) == 6 * len(selected)
    assert all(r.delta >= 0 for r in hook.records)
    if selected:
        out = hook.decide(quantile=0.9)
        assert len(out["calibration_decisions"]) == 3 and len(out["target_decisions"]) == 3
        assert out["skipped_rounds"] == hook.skipped_rounds
    hook.write_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["round", "sample_id", "label", "loss_local", "loss_agg", "delta"]
    assert len(rows) == 1 + len(hook.records)


def test_in_training_rejects_overlap(small_fed, tiny_pools):
    _, _, parts = small_fed
    train, _ = tiny_pools
    own = parts[0].sample_ids
    with pytest.raises(ValueError, match="overlap"):
        InTrainingAttack(0, train.take(own[:2]), own[:2], train.take(own[:2]), own[:2])
    with pytest.raises(ValueError):
        _attack(small_fed, tiny_pools).decide()
