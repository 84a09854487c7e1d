"""Filter application against dense matrix-power oracles."""

import numpy as np
import pytest

import graphvar as gv
from graphvar.filters import FilterError

from conftest import random_dense_gso


def dense_filter_oracle(s_dense, taps, x):
    out = np.zeros_like(x)
    for k, hk in enumerate(taps):
        out = out + hk * np.linalg.matrix_power(s_dense, k) @ x
    return out


def test_identity_filter(rng):
    s = random_dense_gso(4, rng)
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(gv.apply_filter(s, gv.FilterTaps([1.0]), x), x)


def test_identity_regardless_of_shift(rng):
    taps = gv.FilterTaps([1.0, 0.0, 0.0, 0.0])
    for _ in range(5):
        s = random_dense_gso(5, rng)
        x = rng.standard_normal(5)
        np.testing.assert_allclose(gv.apply_filter(s, taps, x), x)


def test_one_shift_on_two_cycle():
    s = gv.GraphShiftOperator.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
    y = gv.apply_filter(s, gv.FilterTaps([0.0, 1.0]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(y, [0.0, 1.0])


def test_matches_dense_power_oracle(rng):
    s = random_dense_gso(5, rng)
    taps = rng.standard_normal(3)
    x = rng.standard_normal(5)
    got = gv.apply_filter(s, gv.FilterTaps(taps), x)
    np.testing.assert_allclose(got, dense_filter_oracle(s.to_dense(), taps, x), rtol=1e-12)


def test_linearity(rng):
    s = random_dense_gso(6, rng)
    taps = gv.FilterTaps(rng.standard_normal(4))
    x, y = rng.standard_normal(6), rng.standard_normal(6)
    a, b = 0.7, -2.3
    lhs = gv.apply_filter(s, taps, a * x + b * y)
    rhs = a * gv.apply_filter(s, taps, x) + b * gv.apply_filter(s, taps, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_dimension_mismatch():
    s = random_dense_gso(3, np.random.default_rng(0))
    with pytest.raises(FilterError, match="does not match"):
        gv.apply_filter(s, gv.FilterTaps([1.0]), np.zeros(4))


def test_taps_validation():
    with pytest.raises(FilterError):
        gv.FilterTaps([])
    with pytest.raises(FilterError):
        gv.FilterTaps([1.0, np.inf])


class TestMimoShiftApply:
    def test_identity_mixing_zero_shift(self, rng):
        s = random_dense_gso(3, rng)
        x = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(gv.mimo_shift_apply(s, np.eye(2), 0, x), x)

    def test_single_shift_on_path_graph(self):
        s = gv.GraphShiftOperator.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
        x = np.eye(2)
        got = gv.mimo_shift_apply(s, np.eye(2), 1, x)
        np.testing.assert_array_equal(got, s.to_dense() @ x)

    def test_matches_kronecker_oracle(self, rng):
        for _ in range(10):
            n, f = int(rng.integers(2, 5)), int(rng.integers(2, 4))
            k = int(rng.integers(0, 4))
            s = random_dense_gso(n, rng)
            h = rng.standard_normal((f, f))
            x = rng.standard_normal((n, f))
            direct = gv.vec_by_feature(gv.mimo_shift_apply(s, h, k, x))
            s_pow = np.linalg.matrix_power(s.to_dense(), k)
            via_kron = np.kron(h.T, s_pow) @ gv.vec_by_feature(x)
            np.testing.assert_allclose(direct, via_kron, rtol=1e-11, atol=1e-12)

    def test_mixing_shape_mismatch(self, rng):
        s = random_dense_gso(3, rng)
        with pytest.raises(FilterError, match="mixing matrix"):
            gv.mimo_shift_apply(s, np.eye(3), 1, rng.standard_normal((3, 2)))


def test_kronecker_duality_on_4x3_instances():
    # vec(S^k X H) = (H^T (x) S^k) vec(X) to 1e-12 relative error
    rng = np.random.default_rng(42)
    for _ in range(20):
        s = gv.GraphShiftOperator.from_dense(rng.standard_normal((4, 4)))
        h = rng.standard_normal((3, 3))
        x = rng.standard_normal((4, 3))
        k = int(rng.integers(0, 4))
        lhs = gv.vec_by_feature(gv.mimo_shift_apply(s, h, k, x))
        rhs = np.kron(h.T, np.linalg.matrix_power(s.to_dense(), k)) @ gv.vec_by_feature(x)
        denom = max(float(np.max(np.abs(rhs))), 1e-30)
        assert float(np.max(np.abs(lhs - rhs))) / denom < 1e-12
