import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import mp_softmax, naive_matmul
from shakti.errors import ShapeError
from shakti.tensor_core import add, check_tensor, matmul, rmsnorm, silu, softmax_row

f32 = np.float32


def test_matmul_identity_and_selector():
    b = np.array([[1, 2], [3, 4]], f32)
    np.testing.assert_array_equal(matmul(np.eye(2, dtype=f32), b), b)
    sel = matmul(np.array([[1, 0], [0, 0]], f32), np.array([[5, 6], [7, 8]], f32))
    np.testing.assert_array_equal(sel, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((7, 5)).astype(f32)
    b = rng.standard_normal((5, 3)).astype(f32)
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3), f32), np.zeros((4, 2), f32))


def test_matmul_deterministic_and_row_independent(rng):
    a = rng.standard_normal((9, 256)).astype(f32)
    b = rng.standard_normal((256, 40)).astype(f32)
    full = matmul(a, b)
    assert np.array_equal(full, matmul(a, b))
    for i in range(a.shape[0]):
        assert np.array_equal(full[i], matmul(a[i:i + 1], b)[0])


def test_matmul_widens_f16(rng):
    a = rng.standard_normal((3, 4)).astype(np.float16)
    b = rng.standard_normal((4, 2)).astype(f32)
    out = matmul(a, b)
    assert out.dtype == f32
    np.testing.assert_allclose(out, naive_matmul(a.astype(np.float64), b), atol=1e-5)


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(softmax_row(np.zeros(3, f32)), [1 / 3] * 3, atol=1e-7)
    with np.errstate(over="raise", invalid="raise"):
        np.testing.assert_array_equal(softmax_row(np.array([1000, 0], f32)), [1, 0])


def test_softmax_matches_high_precision(rng):
    x = rng.standard_normal(16).astype(f32) * 3
    np.testing.assert_allclose(softmax_row(x, 0.7), mp_softmax(x, 0.7), atol=1e-6)


def test_softmax_nan_propagates():
    assert np.isnan(softmax_row(np.array([0.0, np.nan], f32))).all()


rows = arrays(f32, st.integers(1, 64), elements=st.floats(-50, 50, width=32))


@given(rows, st.floats(-100, 100, width=32))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    y = softmax_row(x)
    assert abs(float(y.sum()) - 1) <= 1e-6
    assert np.abs(softmax_row(x + f32(c)) - y).max() <= 1e-6


def test_silu_values():
    assert silu(np.zeros(1, f32))[0] == 0
    assert abs(silu(np.array([20.0], f32))[0] - 20.0) <= 1e-6
    assert abs(silu(np.array([1.0], f32))[0] - 0.7310585786300049) <= 1e-7
    with np.errstate(over="raise", invalid="raise"):
        assert silu(np.array([-1000.0], f32))[0] == 0


def test_silu_monotone_right_of_stationary_point():
    x = np.linspace(-1.27, 50, 20001, dtype=f32)
    assert (np.diff(silu(x)) >= 0).all()


def test_rmsnorm_cases(rng):
    ones = np.ones(8, f32)
    np.testing.assert_array_equal(rmsnorm(np.zeros(8, f32), ones), np.zeros(8))
    np.testing.assert_allclose(rmsnorm(np.full(8, -3.0, f32), ones, 1e-12), -ones, atol=1e-6)
    x = rng.standard_normal((4, 32)).astype(f32)
    g = rng.standard_normal(32).astype(f32)
    x64 = x.astype(np.float64)
    ref = x64 / np.sqrt((x64 ** 2).mean(-1, keepdims=True) + 1e-5) * g
    np.testing.assert_allclose(rmsnorm(x, g, 1e-5), ref, atol=1e-6)


@given(arrays(f32, 32, elements=st.floats(-10, 10, width=32)))
def test_rmsnorm_output_mean_square_bound(x):
    y = rmsnorm(x, np.ones(32, f32), 1e-5).astype(np.float64)
    ms = float(np.mean(x.astype(np.float64) ** 2))
    assert abs(float(np.mean(y * y)) - ms / (ms + 1e-5)) <= 1e-5
    assert float(np.mean(y * y)) <= 1 + 1e-6


def test_rmsnorm_gain_mismatch():
    with pytest.raises(ShapeError):
        rmsnorm(np.zeros(4, f32), np.ones(5, f32))


def test_add(rng):
    x = rng.standard_normal((3, 4)).astype(f32)
    y = rng.standard_normal((3, 4)).astype(f32)
    np.testing.assert_array_equal(add(x, np.zeros_like(x)), x)
    np.testing.assert_array_equal(add(x, -x), np.zeros_like(x))
    np.testing.assert_allclose(add(x, y), x.astype(np.float64) + y, atol=1e-6)
    with pytest.raises(ShapeError):
        add(x, y.T)


@pytest.mark.parametrize("bad", [np.zeros((0, 3), f32), np.zeros((1,) * 5, f32), np.zeros(3, np.int32)])
def test_check_tensor_rejects(bad):
    with pytest.raises((ShapeError, TypeError)):
        check_tensor(bad)
