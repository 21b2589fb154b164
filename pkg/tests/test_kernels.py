import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visprompt import kernels as K
from visprompt.errors import (DegenerateInputError, DimensionError,
                              OracleError)


def rand(rows, cols, seed):
    return np.random.default_rng(seed).normal(0.0, 1.0, (rows, cols))


class TestSoftmaxRows:
    def test_symmetry(self):
        npt.assert_allclose(K.softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_analytic_two_to_one(self):
        out = K.softmax_rows([[math.log(2.0), 0.0]])
        npt.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_rows_sum_to_one(self):
        out = K.softmax_rows(rand(4, 5, 0))
        # oracle: exact summation
        npt.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-12)
        assert (out >= 0).all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-30, 30))
    def test_shift_invariance(self, seed, shift):
        m = rand(3, 4, seed)
        npt.assert_allclose(K.softmax_rows(m + shift), K.softmax_rows(m),
                            atol=1e-12)

    def test_rejects_nan(self):
        with pytest.raises(DegenerateInputError):
            K.softmax_rows([[np.nan, 0.0]])


class TestLayerNormRows:
    def test_fixed_point(self):
        npt.assert_allclose(K.layer_norm_rows([[1.0, -1.0]]), [[1.0, -1.0]],
                            atol=1e-5)

    def test_constant_row_maps_to_zero(self):
        npt.assert_allclose(K.layer_norm_rows([[3.7, 3.7]]), [[0.0, 0.0]])

    def test_hand_computed(self):
        out = K.layer_norm_rows([[3.0, 1.0, -1.0, -3.0]])
        # oracle: mean 0, variance 5, scaled by 1/sqrt(5 + eps)
        expected = np.array([3.0, 1.0, -1.0, -3.0]) / math.sqrt(5.0 + 1e-5)
        npt.assert_allclose(out[0], expected, atol=1e-12)
        npt.assert_allclose(out[0], [1.3416, 0.4472, -0.4472, -1.3416],
                            atol=1e-4)

    def test_moments(self):
        # row variance >> eps so the eps inside the root is negligible
        out = K.layer_norm_rows(rand(6, 32, 1) * 1000.0)
        npt.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
        npt.assert_allclose(out.var(axis=1), 1.0, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0),
           st.floats(-5.0, 5.0))
    def test_affine_invariance(self, seed, a, b):
        # large row variance keeps eps effects below the stated tolerance
        m = rand(3, 16, seed) * 100.0
        npt.assert_allclose(K.layer_norm_rows(a * m + b),
                            K.layer_norm_rows(m), atol=1e-6)

    def test_needs_two_columns(self):
        with pytest.raises(DimensionError):
            K.layer_norm_rows([[1.0]])


class TestElementwise:
    def test_sigmoid_at_zero(self):
        npt.assert_allclose(K.sigmoid([[0.0]]), [[0.5]])

    def test_sigmoid_open_interval(self):
        # strictness is representable up to |x| ~ 36 in float64
        x = np.random.default_rng(2).uniform(-30.0, 30.0, (50, 4))
        out = K.sigmoid(x)
        assert (out > 0).all() and (out < 1).all()

    def test_sigmoid_no_overflow(self):
        out = K.sigmoid(np.array([[-1e4, 1e4]]))
        assert np.isfinite(out).all()

    def test_gelu_formula(self):
        x = rand(3, 4, 3)
        inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
        npt.assert_allclose(K.gelu(x), 0.5 * x * (1 + np.tanh(inner)),
                            atol=1e-15)


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(K.matmul(np.eye(2), b), b)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            K.matmul(rand(2, 3, 0), rand(4, 2, 1))

    def test_against_triple_loop(self):
        a, b = rand(8, 48, 4), rand(48, 32, 5)
        expected = np.zeros((8, 32))
        for i in range(8):
            for j in range(32):
                acc = 0.0
                for k in range(48):
                    acc += a[i, k] * b[k, j]
                expected[i, j] = acc
        npt.assert_allclose(K.matmul(a, b), expected, atol=1e-12)


class TestL2Normalize:
    def test_three_four_five(self):
        npt.assert_allclose(K.l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]])

    def test_unit_norms(self):
        out = K.l2_normalize_rows(rand(5, 7, 6))
        npt.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_zero_row(self):
        with pytest.raises(DegenerateInputError):
            K.l2_normalize_rows([[0.0, 0.0]])


class TestCentralDiff:
    def test_square(self):
        grad = K.central_diff_gradient(lambda x: float((x ** 2).sum()),
                                       np.array([[3.0]]))
        npt.assert_allclose(grad, [[6.0]], atol=1e-8)

    def test_constant(self):
        grad = K.central_diff_gradient(lambda x: 1.25, rand(2, 3, 7))
        npt.assert_array_equal(grad, np.zeros((2, 3)))

    def test_non_finite(self):
        with pytest.raises(OracleError):
            K.central_diff_gradient(lambda x: float("nan"), rand(1, 2, 8))


VJP_CASES = [
    ("softmax", K.softmax_rows,
     lambda x, dy: K.softmax_rows_vjp(K.softmax_rows(x), dy)),
    ("layer_norm", K.layer_norm_rows, K.layer_norm_rows_vjp),
    ("sigmoid", K.sigmoid, lambda x, dy: K.sigmoid_vjp(K.sigmoid(x), dy)),
    ("gelu", K.gelu, K.gelu_vjp),
    ("l2_normalize", K.l2_normalize_rows, K.l2_normalize_rows_vjp),
]


@pytest.mark.parametrize("name,forward,vjp",
                         VJP_CASES, ids=[c[0] for c in VJP_CASES])
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_central_differences(name, forward, vjp, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (3, 5))
    weights = rng.normal(0.0, 1.0, (3, 5))
    analytic = vjp(x, weights)
    numeric = K.central_diff_gradient(
        lambda m: float((forward(m) * weights).sum()), x)
    assert K.relative_error(analytic, numeric) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_matmul_backward_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    weights = rng.normal(size=(3, 2))
    da, db = K.matmul_vjp(a, b, weights)
    num_a = K.central_diff_gradient(
        lambda m: float((K.matmul(m, b) * weights).sum()), a)
    num_b = K.central_diff_gradient(
        lambda m: float((K.matmul(a, m) * weights).sum()), b)
    assert K.relative_error(da, num_a) < 1e-5
    assert K.relative_error(db, num_b) < 1e-5


def test_relative_error_of_vanishing_gradients_is_zero():
    assert K.relative_error(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
