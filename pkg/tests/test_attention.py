import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import attention_rows, masked_dense_attention, rope_rotate, sparse_mask_by_rule
from shakti.attention import (KvCache, SparsePattern, apply_rope, build_rope_table, build_sparse_mask,
                              cache_append, gqa_attend, sparse_attend)
from shakti.errors import CacheError, ConfigError

f32 = np.float32


def test_rope_table_basics():
    t = build_rope_table(64, 10000.0, 16)
    np.testing.assert_array_equal(t.cos[0], 1)
    np.testing.assert_array_equal(t.sin[0], 0)
    th = t.theta
    assert th[0] == 1.0 and (np.diff(th) < 0).all()
    i = np.arange(32)
    np.testing.assert_allclose(th, [10000.0 ** (-2 * k / 64) for k in i], rtol=1e-7, atol=0)


def test_rope_unit_angle():
    t = build_rope_table(2, 10000.0, 4)
    assert abs(t.cos[1, 0] - 0.5403023058681398) < 1e-7
    assert abs(t.sin[1, 0] - 0.8414709848078965) < 1e-7


def test_rope_odd_head_dim():
    with pytest.raises(ConfigError):
        build_rope_table(7)


def test_apply_rope_identity_norm_and_oracle(rng):
    t = build_rope_table(32, 10000.0, 128)
    x = rng.standard_normal((3, 32)).astype(f32)
    np.testing.assert_array_equal(apply_rope(x, 0, t), x)
    y = apply_rope(x, 77, t)
    pair_norm = lambda a: np.hypot(a[..., 0::2], a[..., 1::2])
    np.testing.assert_allclose(pair_norm(y), pair_norm(x), atol=1e-6)
    np.testing.assert_allclose(y, rope_rotate(x, 77), atol=1e-5)
    with pytest.raises(ValueError):
        apply_rope(x, 128, t)


def test_apply_rope_batched_matches_single(rng):
    t = build_rope_table(64, 10000.0, 64)
    x = rng.standard_normal((10, 4, 64)).astype(f32)
    batched = apply_rope(x, np.arange(10), t)
    for p in range(10):
        assert np.array_equal(batched[p], apply_rope(x[p], p, t))


@pytest.mark.parametrize("head_dim", [2, 32, 64])
@pytest.mark.parametrize("shift", [1, 7, 100])
def test_rope_relative_position(head_dim, shift, rng):
    t = build_rope_table(head_dim, 10000.0, 512)
    for _ in range(10):
        q = rng.standard_normal((1, head_dim)).astype(f32)
        k = rng.standard_normal((1, head_dim)).astype(f32)
        m, n = rng.integers(0, 300, 2)
        a = float(np.sum(apply_rope(q, m, t).astype(np.float64) * apply_rope(k, n, t)))
        b = float(np.sum(apply_rope(q, m + shift, t).astype(np.float64) * apply_rope(k, n + shift, t)))
        assert abs(a - b) <= 1e-5


# --- cache ---------------------------------------------------------------------

def test_cache_append_and_errors(rng):
    c = KvCache(4, 2, 8)
    k = rng.standard_normal((2, 8)).astype(f32)
    cache_append(c, k, k, 0)
    assert c.filled == 1 and c.next_pos == 1
    with pytest.raises(CacheError):
        c.append(k, k, 5)
    with pytest.raises(CacheError):
        gqa_attend(np.zeros((2, 8), f32), KvCache(4, 2, 8))


def test_cache_evicts_oldest(rng):
    W = 5
    c = KvCache(W, 1, 4)
    ks = rng.standard_normal((W + 3, 1, 4)).astype(f32)
    for p, k in enumerate(ks):
        c.append(k, k * 2, p)
        assert c.filled == min(p + 1, W)
    k_live, v_live = c.view()
    np.testing.assert_array_equal(k_live, ks[-W:])
    np.testing.assert_array_equal(v_live, ks[-W:] * 2)
    np.testing.assert_array_equal(c.positions(), np.arange(3, W + 3))


def test_single_entry_attention_is_value(rng):
    c = KvCache(8, 2, 16)
    v = rng.standard_normal((2, 16)).astype(f32)
    c.append(rng.standard_normal((2, 16)).astype(f32), v, 0)
    out = gqa_attend(rng.standard_normal((6, 16)).astype(f32), c, 2)
    np.testing.assert_array_equal(out, np.repeat(v, 3, axis=0))


def _filled_cache(rng, n, n_kv, hd, window=None):
    c = KvCache(window or n, n_kv, hd)
    ks = rng.standard_normal((n, n_kv, hd)).astype(f32)
    vs = rng.standard_normal((n, n_kv, hd)).astype(f32)
    for p in range(n):
        c.append(ks[p], vs[p], p)
    return c, ks, vs


def test_gqa_equals_mha_when_heads_match(rng):
    c, ks, vs = _filled_cache(rng, 40, 4, 32)
    q = rng.standard_normal((4, 32)).astype(f32)
    ref = np.stack([attention_rows(q[h].astype(np.float64), ks[:, h], vs[:, h]) for h in range(4)])
    assert np.abs(gqa_attend(q, c, 4) - ref).max() <= 1e-5


def test_gqa_equals_mqa_with_one_kv_head(rng):
    c, ks, vs = _filled_cache(rng, 40, 1, 32)
    q = rng.standard_normal((6, 32)).astype(f32)
    ref = np.stack([attention_rows(q[h].astype(np.float64), ks[:, 0], vs[:, 0]) for h in range(6)])
    assert np.abs(gqa_attend(q, c, 1) - ref).max() <= 1e-5


def test_gqa_group_mapping(rng):
    c, ks, vs = _filled_cache(rng, 12, 2, 16)
    q = rng.standard_normal((6, 16)).astype(f32)
    out = gqa_attend(q, c, 2)
    for h in range(6):
        ref = attention_rows(q[h].astype(np.float64), ks[:, h // 3], vs[:, h // 3])
        assert np.abs(out[h] - ref).max() <= 1e-5


def test_gqa_divisibility_error():
    c = KvCache(4, 3, 8)
    c.append(np.zeros((3, 8), f32), np.zeros((3, 8), f32), 0)
    with pytest.raises(ConfigError):
        gqa_attend(np.zeros((4, 8), f32), c, 3)


def test_window_truncation_matches_unbounded_oracle(rng):
    W, n = 6, 15
    ring, ks, vs = _filled_cache(rng, n, 2, 8, window=W)
    q = rng.standard_normal((4, 8)).astype(f32)
    out = gqa_attend(q, ring, 2)
    ref = np.stack([attention_rows(q[h].astype(np.float64), ks[-W:, h // 2], vs[-W:, h // 2]) for h in range(4)])
    assert np.abs(out - ref).max() <= 1e-5


def test_window_not_reached_is_bit_identical(rng):
    small, ks, vs = _filled_cache(rng, 10, 2, 8, window=10)
    big = KvCache(1000, 2, 8)
    for p in range(10):
        big.append(ks[p], vs[p], p)
    q = rng.standard_normal((4, 8)).astype(f32)
    assert np.array_equal(gqa_attend(q, small), gqa_attend(q, big))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_attention_output_in_convex_hull(n, window, seed):
    r = np.random.default_rng(seed)
    c, ks, vs = _filled_cache(r, n, 1, 8, window=window)
    out = gqa_attend(r.standard_normal((2, 8)).astype(f32), c, 1)
    live = vs[-min(n, window):, 0]
    assert (out >= live.min(0) - 1e-6).all() and (out <= live.max(0) + 1e-6).all()


# --- block-sparse --------------------------------------------------------------

def test_sparse_mask_saturated_and_diagonal():
    causal = np.tril(np.ones((10, 10), bool))
    assert np.array_equal(build_sparse_mask(10, SparsePattern(3, 4, 0)), causal)
    assert np.array_equal(build_sparse_mask(7, SparsePattern(1, 0, 0)), np.eye(7, dtype=bool))


def test_sparse_mask_hand_enumerated():
    # B=2, seq=6, local=1, global=1: every block pair is active -> plain causal
    assert np.array_equal(build_sparse_mask(6, SparsePattern(2, 1, 1)), np.tril(np.ones((6, 6), bool)))
    # seq=8 adds block 3, which sees neither block 1 (distance 2) nor is it global
    expected = np.tril(np.ones((8, 8), bool))
    expected[6:8, 2:4] = False
    m = build_sparse_mask(8, SparsePattern(2, 1, 1))
    assert np.array_equal(m, expected)
    assert np.array_equal(m, sparse_mask_by_rule(8, 2, 1, 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 4), st.integers(0, 3))
def test_sparse_mask_rule(seq, block, local, glob):
    pat = SparsePattern(block, local, glob)
    assert np.array_equal(build_sparse_mask(seq, pat), sparse_mask_by_rule(seq, block, local, glob))


def test_sparse_attend_dense_causal(rng):
    q, k, v = (rng.standard_normal((24, 3, 16)).astype(f32) for _ in range(3))
    mask = build_sparse_mask(24, SparsePattern(4, 10, 0))
    ref = masked_dense_attention(q, k, v, np.tril(np.ones((24, 24), bool)))
    assert np.abs(sparse_attend(q, k, v, mask, block=4) - ref).max() <= 1e-5


def test_sparse_attend_diagonal_returns_values(rng):
    q, k, v = (rng.standard_normal((9, 2, 8)).astype(f32) for _ in range(3))
    out = sparse_attend(q, k, v, np.eye(9, dtype=bool), block=1)
    np.testing.assert_array_equal(out, v)


def test_sparse_attend_random_mask(rng):
    seq = 16
    mask = (rng.random((seq, seq)) < 0.4) & np.tril(np.ones((seq, seq), bool))
    mask |= np.eye(seq, dtype=bool)
    q, k, v = (rng.standard_normal((seq, 2, 8)).astype(f32) for _ in range(3))
    for block in (1, 3, 4, 16):
        assert np.abs(sparse_attend(q, k, v, mask, block=block) - masked_dense_attention(q, k, v, mask)).max() <= 1e-5


def test_sparse_attend_skips_inactive_blocks(rng, monkeypatch):
    import shakti.attention as att
    widths = []
    real = att.softmax_row

    def spy(x, scale=1.0):
        widths.append(x.shape[-1])
        return real(x, scale)

    monkeypatch.setattr(att, "softmax_row", spy)
    seq, B = 64, 8
    mask = build_sparse_mask(seq, SparsePattern(B, 1, 0))
    q, k, v = (rng.standard_normal((seq, 1, 8)).astype(f32) for _ in range(3))
    sparse_attend(q, k, v, mask, block=B)
    assert max(widths) == 2 * B  # local band of one block each side, causal


def test_sparse_attend_empty_row():
    z = np.zeros((2, 1, 4), f32)
    with pytest.raises(RuntimeError):
        sparse_attend(z, z, z, np.array([[True, False], [False, False]]))
