"""Window semantics, oracle equivalence, and gradients for the
neighborhood attention kernels."""

import numpy as np
import pytest

from aio1 import attention as at
from aio1 import tensor as tz
from aio1.attention import (AttentionConfig, full_attention_oracle,
                            init_attention_weights, na1d, na2d,
                            neighborhood_window_1d, receptive_field)
from aio1.errors import ContractViolation
from aio1.tensor import Tensor


def _weights(c, cfg, seed, two_d=False, dtype=np.float32, random_bias=True):
    rng = np.random.default_rng(seed)
    w = init_attention_weights(c, cfg, rng, two_d=two_d, dtype=dtype)
    if random_bias:
        w.rpb.data[:] = rng.uniform(-0.5, 0.5, w.rpb.data.shape).astype(dtype)
    for b in (w.bq, w.bk, w.bv, w.bo):
        b.data[:] = rng.uniform(-0.1, 0.1, b.data.shape).astype(dtype)
    return w


# ---------------------------------------------------------------------------
# window geometry
# ---------------------------------------------------------------------------

def test_window_worked_examples():
    assert neighborhood_window_1d(5, 10, 3, 1) == [4, 5, 6]
    assert neighborhood_window_1d(0, 10, 3, 1) == [0, 1, 2]
    assert neighborhood_window_1d(9, 10, 3, 2) == [5, 7, 9]
    assert neighborhood_window_1d(8, 10, 3, 2) == [4, 6, 8]


def test_window_out_of_range():
    with pytest.raises(IndexError):
        neighborhood_window_1d(10, 10, 3, 1)


def brute_force_window(i, length, k, d):
    """Independent construction: enumerate the coset, slide a k-run over
    it, pick the run whose center is closest to i (shifted inward)."""
    coset = [j for j in range(length) if j % d == i % d]
    if len(coset) <= k:
        return coset
    pos = coset.index(i)
    start = min(max(pos - (k - 1) // 2, 0), len(coset) - k)
    return coset[start:start + k]


def test_window_exhaustive_properties():
    for length in range(1, 65):
        for k in (1, 3, 5, 7):
            for d in (1, 2, 3, 8):
                for i in range(length):
                    w = neighborhood_window_1d(i, length, k, d)
                    coset = [j for j in range(length) if j % d == i % d]
                    assert w == brute_force_window(i, length, k, d)
                    assert i in w
                    assert len(w) == min(k, len(coset))
                    assert all(0 <= j < length for j in w)
                    assert all(j % d == i % d for j in w)
                    # contiguous run of the coset
                    first = coset.index(w[0])
                    assert w == coset[first:first + len(w)]


def test_receptive_field_values():
    frames, seconds = receptive_field(5, 2 ** 10, 100)
    assert frames == 4097
    assert abs(seconds - 41.0) < 0.5
    frames, seconds = receptive_field(5, 2 ** 11, 100)
    assert frames == 8193
    assert abs(seconds - 82.0) < 0.5
    assert receptive_field(1, 999, 100)[0] == 1


# ---------------------------------------------------------------------------
# na1d
# ---------------------------------------------------------------------------

def test_na1d_uniform_softmax_is_window_mean():
    # zero query/key and zero bias make every window average its values
    t, c = 12, 8
    cfg = AttentionConfig(kernel_size=3, dilation=2, num_heads=2)
    w = _weights(c, cfg, 0, random_bias=False)
    w.wq.data[:] = 0.0
    w.wk.data[:] = 0.0
    w.bq.data[:] = 0.0
    w.bk.data[:] = 0.0
    w.wv.data[:] = np.eye(c, dtype=np.float32)
    w.bv.data[:] = 0.0
    w.wo.data[:] = np.eye(c, dtype=np.float32)
    w.bo.data[:] = 0.0
    rng = np.random.default_rng(1)
    x = rng.standard_normal((t, c)).astype(np.float32)
    out = na1d(Tensor(x), w, cfg).data
    for i in range(t):
        win = neighborhood_window_1d(i, t, 3, 2)
        np.testing.assert_allclose(out[i], x[win].mean(axis=0), atol=1e-6)


def test_na1d_wide_kernel_equals_full_attention():
    t, c = 9, 8
    cfg = AttentionConfig(kernel_size=2 * t - 1, dilation=1, num_heads=2)
    w = _weights(c, cfg, 2)
    x = np.random.default_rng(3).standard_normal((t, c)).astype(np.float32)
    got = na1d(Tensor(x), w, cfg).data
    want = full_attention_oracle(x, w, np.ones((t, t), bool),
                                 rel=np.add.outer(-np.arange(t), np.arange(t))
                                 + cfg.kernel_size - 1,
                                 num_heads=2)
    np.testing.assert_allclose(got, want, atol=1e-5)


@pytest.mark.parametrize("t", [1, 7, 100])
def test_na1d_shape_preserved(t):
    c = 8
    cfg = AttentionConfig(kernel_size=5, dilation=2, num_heads=4)
    w = _weights(c, cfg, 4)
    x = np.random.default_rng(5).standard_normal((t, c)).astype(np.float32)
    assert na1d(Tensor(x), w, cfg).shape == (t, c)


def test_na1d_matches_oracle_randomized():
    rng = np.random.default_rng(6)
    for trial in range(25):
        t = int(rng.integers(1, 65))
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.choice([2, 4, 6]))
        k = int(rng.choice([3, 5]))
        d = int(rng.choice([1, 2, 4, 8]))
        cfg = AttentionConfig(kernel_size=k, dilation=d, num_heads=heads)
        w = _weights(c, cfg, 100 + trial)
        x = rng.standard_normal((t, c)).astype(np.float32)
        mask, rel = at.na1d_mask(t, cfg)
        got = na1d(Tensor(x), w, cfg).data
        want = full_attention_oracle(x, w, mask, rel, heads)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_na1d_batched_matches_per_stem():
    t, c, s = 20, 8, 3
    cfg = AttentionConfig(kernel_size=5, dilation=2, num_heads=2)
    w = _weights(c, cfg, 7)
    x = np.random.default_rng(8).standard_normal((s, t, c)).astype(np.float32)
    batched = na1d(Tensor(x), w, cfg).data
    for i in range(s):
        single = na1d(Tensor(x[i]), w, cfg).data
        np.testing.assert_allclose(batched[i], single, atol=1e-6)


def test_na1d_translation_covariance_interior():
    t, c, d = 64, 8, 2
    cfg = AttentionConfig(kernel_size=3, dilation=d, num_heads=2)
    w = _weights(c, cfg, 9)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((t, c)).astype(np.float32)
    shifted = np.roll(x, d, axis=0)
    out = na1d(Tensor(x), w, cfg).data
    out_shifted = na1d(Tensor(shifted), w, cfg).data
    # interior frames: window centred in both versions
    lo, hi = 3 * d, t - 3 * d
    np.testing.assert_allclose(out_shifted[lo + d:hi + d], out[lo:hi], atol=1e-6)


# ---------------------------------------------------------------------------
# na2d
# ---------------------------------------------------------------------------

def test_na2d_single_stem_reduces_to_na1d():
    t, c = 15, 8
    cfg2 = AttentionConfig(kernel_size=5, dilation=1, num_heads=2)
    w2 = _weights(c, cfg2, 11, two_d=True)
    cfg1 = AttentionConfig(kernel_size=5, dilation=1, num_heads=2)
    w1 = _weights(c, cfg1, 11)
    # share projections; embed the 1-D bias along the zero-stem-offset row
    for src, dst in [(w1.wq, w2.wq), (w1.bq, w2.bq), (w1.wk, w2.wk),
                     (w1.bk, w2.bk), (w1.wv, w2.wv), (w1.bv, w2.bv),
                     (w1.wo, w2.wo), (w1.bo, w2.bo)]:
        dst.data[:] = src.data
    span = 2 * 5 - 1
    w2.rpb.data[:] = 0.0
    w2.rpb.data[:, (5 - 1) * span:(5 - 1) * span + span] = w1.rpb.data
    x = np.random.default_rng(12).standard_normal((1, t, c)).astype(np.float32)
    got = na2d(Tensor(x), w2, cfg2).data[0]
    want = na1d(Tensor(x[0]), w1, cfg1).data
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_na2d_identical_stems_symmetric():
    t, c = 10, 8
    cfg = AttentionConfig(kernel_size=5, dilation=1, num_heads=2)
    w = _weights(c, cfg, 13, two_d=True, random_bias=False)
    x0 = np.random.default_rng(14).standard_normal((t, c)).astype(np.float32)
    x = np.stack([x0, x0])
    out = na2d(Tensor(x), w, cfg).data
    # stems 0 and 1 see mirrored windows; zero bias keeps them exchangeable
    np.testing.assert_allclose(out[0], out[1], atol=1e-6)


def test_na2d_matches_oracle_randomized():
    rng = np.random.default_rng(15)
    for trial in range(25):
        s = int(rng.integers(1, 5))
        t = int(rng.integers(1, 13))
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.choice([2, 4]))
        k = int(rng.choice([3, 5]))
        cfg = AttentionConfig(kernel_size=k, dilation=1, num_heads=heads)
        w = _weights(c, cfg, 200 + trial, two_d=True)
        x = rng.standard_normal((s, t, c)).astype(np.float32)
        mask, rel = at.na2d_mask(s, t, cfg)
        got = na2d(Tensor(x), w, cfg).data.reshape(s * t, c)
        want = full_attention_oracle(x.reshape(s * t, c), w, mask, rel, heads)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_na2d_whole_grid_case():
    s, t, c = 4, 5, 8
    cfg = AttentionConfig(kernel_size=5, dilation=1, num_heads=2)
    w = _weights(c, cfg, 16, two_d=True)
    x = np.random.default_rng(17).standard_normal((s, t, c)).astype(np.float32)
    mask, rel = at.na2d_mask(s, t, cfg)
    got = na2d(Tensor(x), w, cfg).data.reshape(s * t, c)
    want = full_attention_oracle(x.reshape(s * t, c), w, mask, rel, 2)
    np.testing.assert_allclose(got, want, atol=1e-5)


# ---------------------------------------------------------------------------
# oracle contract
# ---------------------------------------------------------------------------

def test_oracle_identity_mask_returns_projected_values():
    t, c = 6, 8
    cfg = AttentionConfig(kernel_size=3, dilation=1, num_heads=2)
    w = _weights(c, cfg, 18)
    x = np.random.default_rng(19).standard_normal((t, c)).astype(np.float32)
    got = full_attention_oracle(x, w, np.eye(t, dtype=bool), None, 2)
    v = x @ w.wv.data + w.bv.data
    np.testing.assert_allclose(got, v @ w.wo.data + w.bo.data, atol=1e-5)


def test_oracle_all_false_row_raises():
    cfg = AttentionConfig(kernel_size=3, dilation=1, num_heads=2)
    w = _weights(8, cfg, 20)
    mask = np.ones((4, 4), bool)
    mask[2] = False
    with pytest.raises(ContractViolation):
        full_attention_oracle(np.zeros((4, 8), np.float32), w, mask, None, 2)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_attention_grad_check():
    t, c = 7, 4
    cfg = AttentionConfig(kernel_size=3, dilation=2, num_heads=2)
    w = _weights(c, cfg, 21, dtype=np.float64)
    rng = np.random.default_rng(22)
    x = Tensor(rng.standard_normal((t, c)), requires_grad=True)

    params = [x, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo, w.rpb]

    def loss():
        out = na1d(x, w, cfg)
        return tz.tsum(tz.sigmoid(out))

    err = tz.grad_check(loss, params)
    assert err < 1e-4, err


def test_attention_2d_grad_check():
    s, t, c = 2, 4, 4
    cfg = AttentionConfig(kernel_size=3, dilation=1, num_heads=2)
    w = _weights(c, cfg, 23, two_d=True, dtype=np.float64)
    rng = np.random.default_rng(24)
    x = Tensor(rng.standard_normal((s, t, c)), requires_grad=True)

    params = [x, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo, w.rpb]

    def loss():
        return tz.tsum(tz.sigmoid(na2d(x, w, cfg)))

    err = tz.grad_check(loss, params)
    assert err < 1e-4, err
