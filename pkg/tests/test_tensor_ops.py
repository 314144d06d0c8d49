import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunktrain import tensor_ops as ops
from chunktrain.errors import ShapeError

SEEDS = range(20)


def _check(f64_loss, analytic, x, tol):
    """FD in float64 around x; analytic may come from a float32 computation."""
    err = ops.fd_gradcheck(f64_loss, x.astype(np.float64), analytic, eps=1e-6 if tol < 1e-4 else 1e-5)
    assert err < tol, err


# -- linear -------------------------------------------------------------------


def test_linear_identity():
    np.testing.assert_array_equal(ops.linear(np.array([[1.0, 2.0]]), np.eye(2)), [[1.0, 2.0]])


def test_linear_hand_sum():
    assert ops.linear(np.array([[1.0, 1.0]]), np.array([[2.0], [3.0]]))[0, 0] == 5.0


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.linear(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_linear_backward_fd(seed, dtype, tol):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    W = rng.standard_normal((4, 2))
    w_out = rng.standard_normal((3, 2))
    dx, dW = ops.linear_backward(x.astype(dtype), W.astype(dtype), w_out.astype(dtype))
    _check(lambda z: float((ops.linear(z, W) * w_out).sum()), dx, x, tol)
    _check(lambda z: float((ops.linear(x, z) * w_out).sum()), dW, W, tol)


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_allclose(ops.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])


def test_softmax_saturation_needs_max_subtraction():
    y = ops.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.isfinite(y).all()
    assert abs(y[0, 0] - 1.0) < 1e-12 and y[0, 1] < 1e-12


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_softmax_backward_fd(seed, dtype, tol):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7))
    w = rng.standard_normal((4, 7))
    y = ops.softmax_rows(x.astype(dtype))
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    dx = ops.softmax_rows_backward(y, w.astype(dtype))
    _check(lambda z: float((ops.softmax_rows(z) * w).sum()), dx, x, tol)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-30, 30), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_shift_invariant(row, shift):
    x = np.array([row])
    y = ops.softmax_rows(x)
    assert abs(y.sum() - 1.0) < 1e-6
    assert np.abs(ops.softmax_rows(x + shift) - y).max() <= 1e-6


# -- rmsnorm ------------------------------------------------------------------


def test_rmsnorm_constant_vector():
    np.testing.assert_allclose(ops.rmsnorm(np.array([3.0, 3.0, 3.0]), np.ones(3), eps=0.0), [1, 1, 1])


def test_rmsnorm_zero_vector():
    np.testing.assert_array_equal(ops.rmsnorm(np.zeros(4), np.ones(4), eps=1e-6), np.zeros(4))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_rmsnorm_backward_fd(seed, dtype, tol):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 6))
    g = rng.standard_normal(6)
    w = rng.standard_normal((3, 6))
    dx, dg = ops.rmsnorm_backward(x.astype(dtype), g.astype(dtype), w.astype(dtype))
    _check(lambda z: float((ops.rmsnorm(z, g) * w).sum()), dx, x, tol)
    _check(lambda z: float((ops.rmsnorm(x, z) * w).sum()), dg, g, tol)


# -- rope ---------------------------------------------------------------------


def test_rope_position_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 8))
    np.testing.assert_array_equal(ops.rope(x, np.array([0])), x)


def test_rope_odd_dim_rejected():
    with pytest.raises(ShapeError):
        ops.rope(np.ones((2, 1, 3)), np.arange(2))


@pytest.mark.parametrize("seed", SEEDS)
def test_rope_preserves_norm_and_inverts(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3, 16))
    pos = rng.integers(0, 100000, 5)
    y = ops.rope(x, pos)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-6)
    np.testing.assert_allclose(ops.rope(y, -pos), x, atol=1e-9)


@pytest.mark.parametrize("a,b", [(0, 0), (3, 1), (17, 250), (1000, 4)])
def test_rope_relative_dot_matches_complex_rotation(a, b):
    rng = np.random.default_rng(a * 7 + b)
    d = 16
    q = rng.standard_normal((1, 1, d))
    k = rng.standard_normal((1, 1, d))
    got = float((ops.rope(q, np.array([a])) * ops.rope(k, np.array([b]))).sum())
    # pairs (2i, 2i+1) as complex numbers rotated by exp(i * pos * theta_i)
    theta = 10000.0 ** (-np.arange(0, d, 2) / d)
    zq = q[0, 0, 0::2] + 1j * q[0, 0, 1::2]
    zk = k[0, 0, 0::2] + 1j * k[0, 0, 1::2]
    want = float(np.real(np.sum(zq * np.conj(zk) * np.exp(1j * (a - b) * theta))))
    assert abs(got - want) < 1e-9


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_rope_backward_fd(seed, dtype, tol):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4))
    pos = rng.integers(0, 50, 3)
    w = rng.standard_normal((3, 2, 4))
    dx = ops.rope_backward(w.astype(dtype), pos)
    _check(lambda z: float((ops.rope(z, pos) * w).sum()), dx, x, tol)


# -- silu ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_silu_backward_fd(seed, dtype, tol):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5)) * 3
    w = rng.standard_normal((4, 5))
    dx = ops.silu_backward(x.astype(dtype), w.astype(dtype))
    _check(lambda z: float((ops.silu(z) * w).sum()), dx, x, tol)


# -- cross entropy --------------------------------------------------------------


def test_cross_entropy_uniform():
    loss, _ = ops.cross_entropy(np.zeros((3, 8)), np.array([0, 5, 7]))
    assert abs(loss - np.log(8)) < 1e-12


def test_cross_entropy_saturated():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    loss, _ = ops.cross_entropy(logits, np.array([2]))
    assert loss < 1e-9


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        ops.cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


def test_cross_entropy_ignore_and_denominator():
    logits = np.random.default_rng(0).standard_normal((3, 5))
    full, _ = ops.cross_entropy(logits[:2], np.array([1, 2]), denom=4)
    masked, d = ops.cross_entropy(logits, np.array([1, 2, -1]), denom=4)
    assert full == pytest.approx(masked)
    assert not d[2].any()


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
def test_cross_entropy_backward_fd(seed, dtype, tol):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 4))
    targets = rng.integers(0, 4, 2)
    _, d = ops.cross_entropy(logits.astype(dtype), targets)
    np.testing.assert_allclose(d, (ops.softmax_rows(logits) - np.eye(4)[targets]) / 2, rtol=1e-5, atol=1e-7)
    _check(lambda z: ops.cross_entropy(z, targets)[0], d, logits, tol)


# -- fd harness -----------------------------------------------------------------


def test_fd_square():
    g = ops.fd_grad(lambda w: float(w[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-6
    assert ops.fd_gradcheck(lambda w: float(w[0] ** 2), np.array([3.0]), np.array([6.0])) < 1e-6


def test_fd_sum_is_ones():
    w = np.random.default_rng(1).standard_normal(7)
    np.testing.assert_allclose(ops.fd_grad(lambda z: float(z.sum()), w), np.ones(7), atol=1e-9)
