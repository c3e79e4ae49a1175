import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclmia.contrastive import (
    EncoderConfig,
    MoCoState,
    ParamVector,
    ckpt_name,
    encode,
    enqueue,
    info_nce,
    info_nce_loss,
    init_params,
    init_state,
    list_checkpoints,
    load_checkpoint,
    local_train,
    momentum_update,
    per_sample_loss,
    save_checkpoint,
    symmetric_loss,
)
from fclmia.contrastive import encoder as enc
from fclmia.datasets import AugmentationPolicy


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def ce_oracle(q, k, queue, tau):
    logits = [float(np.dot(q, k)) / tau] + [float(np.dot(q, n)) / tau for n in queue]
    top = max(logits)
    return -(logits[0] - top) + math.log(math.fsum(math.exp(l - top) for l in logits))


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def test_encode_taps_and_shapes(tiny_arch, rng):
    p = init_params(tiny_arch, rng)
    x = rng.random((3, 8, 8, 3)).astype(np.float32)
    assert tiny_arch.taps == ("layer1", "layer2", "avgpool", "encoder")
    assert encode(p, tiny_arch, x, "layer1").shape == (3, 8 * 8 * 4)
    assert encode(p, tiny_arch, x, "layer2").shape == (3, 4 * 4 * 8)
    assert encode(p, tiny_arch, x, "avgpool").shape == (3, 8)
    assert encode(p, tiny_arch, x).shape == (3, 8)
    with pytest.raises(KeyError):
        encode(p, tiny_arch, x, "layer9")


def test_default_arch_matches_published_widths():
    a = EncoderConfig()
    assert a.channels == (16, 32, 64, 64) and a.dim == 64
    assert a.taps == ("layer1", "layer2", "layer3", "layer4", "avgpool", "encoder")


def test_normalized_rows_have_unit_norm(tiny_arch, rng):
    p = init_params(tiny_arch, rng, np.float64)
    z = encode(p, tiny_arch, rng.random((5, 8, 8, 3)), normalize_rows=True)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("groups", [0, 2])
def test_encoder_backward_matches_finite_differences(groups, rng):
    arch = EncoderConfig(channels=(4, 4), strides=(1, 2), dim=5, groups=groups)
    p = init_params(arch, rng, np.float64)
    x = rng.random((2, 6, 6, 3))
    g_out = rng.normal(size=(2, 5))
    out, cache = enc.forward(p, arch, x, keep_cache=True)
    grads = enc.backward(p, arch, cache, g_out)

    def f(params):
        return float(np.sum(enc.forward(params, arch, x)[0]["encoder"] * g_out))

    h = 1e-5
    for _ in range(10):
        d = ParamVector({k: rng.normal(size=v.shape) for k, v in p.items()})
        fd = (f(p.axpy(h, d)) - f(p.axpy(-h, d))) / (2 * h)
        an = sum(float(np.sum(grads[k] * d[k])) for k in p.keys())
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

def test_info_nce_reference_values():
    e1, e2 = np.eye(2)
    assert info_nce_loss(e1, e1, e2[None], 1.0) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert info_nce_loss(e1, e1, e2[None], 1.0) == pytest.approx(0.3133, abs=1e-4)
    e3 = np.eye(3)
    assert info_nce_loss(e3[0], e3[1], e3[2][None], 1.0) == pytest.approx(0.6931, abs=1e-4)


def test_info_nce_rejects_bad_input():
    with pytest.raises(ValueError):
        info_nce_loss(np.ones(2), np.ones(2), np.ones((1, 2)), 0.0)
    with pytest.raises(ValueError):
        info_nce_loss(np.array([np.nan, 1.0]), np.ones(2), np.ones((1, 2)), 0.2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_info_nce_queue_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, k = unit(rng.normal(size=8)), unit(rng.normal(size=8))
    queue = unit(rng.normal(size=(12, 8)))
    a = info_nce_loss(q, k, queue, 0.2)
    b = info_nce_loss(q, k, queue[rng.permutation(12)], 0.2)
    assert abs(a - b) <= 1e-12


def test_info_nce_matches_cross_entropy_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d, kq = rng.integers(2, 16), rng.integers(1, 40)
        tau = rng.uniform(0.05, 1.0)
        q, k = unit(rng.normal(size=d)), unit(rng.normal(size=d))
        queue = unit(rng.normal(size=(kq, d)))
        assert abs(info_nce_loss(q, k, queue, tau) - ce_oracle(q, k, queue, tau)) <= 1e-9


def test_info_nce_gradient_check():
    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(20):
        d = rng.integers(3, 12)
        q = rng.normal(size=(1, d))
        k, queue = unit(rng.normal(size=(1, d))), unit(rng.normal(size=(16, d)))
        tau = rng.uniform(0.1, 1.0)
        _, g = info_nce(q, k, queue, tau)
        fd = np.zeros(d)
        for j in range(d):
            e = np.zeros((1, d))
            e[0, j] = h
            fd[j] = (info_nce(q + e, k, queue, tau)[0][0] - info_nce(q - e, k, queue, tau)[0][0]) / (2 * h)
        assert np.linalg.norm(g[0] - fd) <= 1e-3 * np.linalg.norm(fd)


def test_symmetric_loss_gradient_check(tiny_arch):
    rng = np.random.default_rng(2)
    state = init_state(tiny_arch, rng, queue_size=16, dtype=np.float64)
    state = MoCoState(state.query, init_params(tiny_arch, rng, np.float64), state.queue, 0, 0.99, 0.2, tiny_arch)
    v1, v2 = rng.random((3, 8, 8, 3)), rng.random((3, 8, 8, 3))
    _, grads, _ = symmetric_loss(state, v1, v2)

    def f(params):
        s = MoCoState(params, state.key, state.queue, 0, 0.99, 0.2, tiny_arch)
        return symmetric_loss(s, v1, v2, with_grad=False)[0].mean()

    h = 1e-5
    for _ in range(5):
        d = ParamVector({k: rng.normal(size=v.shape) for k, v in state.query.items()})
        fd = (f(state.query.axpy(h, d)) - f(state.query.axpy(-h, d))) / (2 * h)
        an = sum(float(np.sum(grads[k] * d[k])) for k in d.keys())
        assert abs(fd - an) <= 1e-3 * max(abs(fd), 1e-8)


# ---------------------------------------------------------------------------
# Momentum and queue
# ---------------------------------------------------------------------------

def test_momentum_update_examples():
    k, q = ParamVector({"w": np.array([2.0, 4.0])}), ParamVector({"w": np.array([0.0, 8.0])})
    np.testing.assert_array_equal(momentum_update(k, q, 1.0)["w"], [2.0, 4.0])
    np.testing.assert_array_equal(momentum_update(k, q, 0.0)["w"], [0.0, 8.0])
    np.testing.assert_array_equal(momentum_update(k, q, 0.5)["w"], [1.0, 6.0])
    with pytest.raises(ValueError):
        momentum_update(k, q, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_momentum_update_superposition(m, seed):
    rng = np.random.default_rng(seed)
    k1, k2, q1, q2 = (ParamVector({"w": rng.normal(size=4)}) for _ in range(4))
    lhs = momentum_update(k1 + k2, q1 + q2, m)
    rhs = momentum_update(k1, q1, m) + momentum_update(k2, q2, m)
    np.testing.assert_allclose(lhs["w"], rhs["w"], atol=1e-12)


def test_enqueue_wraps_around(tiny_arch):
    queue = np.zeros((4, tiny_arch.dim))
    p = init_params(tiny_arch, np.random.default_rng(0))
    state = MoCoState(p, p.copy(), queue, 3, 0.99, 0.2, tiny_arch)
    keys = np.stack([np.full(tiny_arch.dim, 1.0), np.full(tiny_arch.dim, 2.0)])
    new = enqueue(state, keys)
    assert new.queue_ptr == 1
    np.testing.assert_array_equal(new.queue[3], keys[0])
    np.testing.assert_array_equal(new.queue[0], keys[1])
    np.testing.assert_array_equal(new.queue[1:3], 0.0)
    np.testing.assert_array_equal(state.queue, 0.0)
    with pytest.raises(ValueError):
        enqueue(state, np.zeros((5, tiny_arch.dim)))


def test_state_validation(tiny_arch):
    p = init_params(tiny_arch, np.random.default_rng(0))
    with pytest.raises(ValueError):
        MoCoState(p, p, np.zeros((4, tiny_arch.dim)), 4, 0.99, 0.2, tiny_arch)
    with pytest.raises(ValueError):
        MoCoState(p, p, np.zeros((4, 3)), 0, 0.99, 0.2, tiny_arch)


# ---------------------------------------------------------------------------
# Local training and per-sample loss
# ---------------------------------------------------------------------------

def test_local_train_rejects_zero_epochs(tiny_arch, tiny_pools, rng):
    st_ = init_state(tiny_arch, rng, 16)
    with pytest.raises(ValueError):
        local_train(st_, tiny_pools[0].pixels[:8], 0, 0.1, AugmentationPolicy(), rng)


def test_local_train_reduces_loss_and_is_deterministic(tiny_arch, tiny_pools):
    data = tiny_pools[0].pixels[:8]
    st_ = init_state(tiny_arch, np.random.default_rng(0), 16, data=data, policy=AugmentationPolicy())
    a, trace = local_train(st_, data, 50, 0.1, AugmentationPolicy(), np.random.default_rng(5), batch_size=8)
    b, _ = local_train(st_, data, 50, 0.1, AugmentationPolicy(), np.random.default_rng(5), batch_size=8)
    assert len(trace) == 50
    assert np.mean(trace[-5:]) < np.mean(trace[:5])
    assert a.checksum() == b.checksum()


def test_per_sample_loss_symmetric_and_nonnegative(tiny_arch, tiny_pools):
    st_ = init_state(tiny_arch, np.random.default_rng(0), 16)
    x = tiny_pools[0].pixels[0]
    # identity views, key == query: both directions see the same pair
    v = x[None]
    losses, _, _ = symmetric_loss(st_, v, v, with_grad=False)
    kout = encode(st_.key, tiny_arch, v, normalize_rows=True)
    qout = encode(st_.query, tiny_arch, v, normalize_rows=True)
    l1 = info_nce_loss(qout[0], kout[0], st_.queue, st_.tau)
    assert losses[0] == pytest.approx(2 * l1, rel=1e-5)
    for s in range(5):
        assert per_sample_loss(st_, x, AugmentationPolicy(), np.random.default_rng(s)) >= 0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_arch, rng):
    st_ = init_state(tiny_arch, rng, 16)
    st_ = MoCoState(st_.query, st_.key, st_.queue, 5, 0.9, 0.3, tiny_arch)
    path = save_checkpoint(tmp_path, st_, 12, {"extra": np.arange(3)}, {"who": 1})
    assert path.name == ckpt_name(12) == "ckpt_round_000012"
    loaded, rnd, extras, meta = load_checkpoint(path)
    assert rnd == 12 and meta == {"who": 1}
    assert loaded.checksum() == st_.checksum()
    np.testing.assert_array_equal(extras["extra"], np.arange(3))
    assert list_checkpoints(tmp_path) == [path]


def test_checkpoint_bytes_are_reproducible(tmp_path, tiny_arch):
    st_ = init_state(tiny_arch, np.random.default_rng(0), 16)
    a = save_checkpoint(tmp_path / "a", st_, 1)
    b = save_checkpoint(tmp_path / "b", st_, 1)
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
