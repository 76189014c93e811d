import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special as sp

from nrmkit.special_math import (
    LogReal,
    abs_q_neg,
    gamma_upper_log,
    generalized_stirling,
    reg_inc_gamma_q,
    rising_factorial_log,
    signed_logsumexp,
)


def tail_quad(f, lo, span=80.0):
    """Finite-interval quadrature oracle for integrals on (lo, inf) of
    exponentially decaying integrands; the discarded remainder is ~e^{-span}."""
    val, err = integrate.quad(f, lo, lo + span, limit=300)
    return val


class TestLogReal:
    def test_zero_iff_sign_zero(self):
        assert LogReal.from_float(0.0).sign == 0
        assert LogReal.zero().to_float() == 0.0
        assert LogReal.from_float(-3.0).sign == -1

    @given(st.floats(min_value=1e-300, max_value=1e300),
           st.floats(min_value=1e-300, max_value=1e300),
           st.sampled_from([1, -1]), st.sampled_from([1, -1]))
    def test_product_round_trip(self, x, y, sx, sy):
        a, b = sx * x, sy * y
        prod = (LogReal.from_float(a) * LogReal.from_float(b)).to_float()
        expected = a * b
        if expected == 0.0 or math.isinf(expected) or abs(expected) > 1e305:
            return  # outside (or too near the edge of) the representable range
        # Log-domain storage carries |log| * eps of relative error per operand,
        # so the round-trip bound scales with the operand log magnitudes.
        logs = abs(math.log(x)) + abs(math.log(y)) + abs(math.log(abs(expected)))
        tol = (4.0 + logs) * np.finfo(float).eps
        assert prod == pytest.approx(expected, rel=tol)

    @given(st.floats(min_value=0.05, max_value=20.0),
           st.floats(min_value=0.05, max_value=20.0))
    def test_product_round_trip_unit_scale_is_tight(self, x, y):
        prod = (LogReal.from_float(x) * LogReal.from_float(y)).to_float()
        assert prod == pytest.approx(x * y, rel=4 * np.finfo(float).eps)

    @given(st.floats(min_value=-1e6, max_value=1e6),
           st.floats(min_value=-1e6, max_value=1e6))
    def test_addition_matches_floats(self, a, b):
        got = (LogReal.from_float(a) + LogReal.from_float(b)).to_float()
        assert got == pytest.approx(a + b, rel=1e-12, abs=1e-9)

    def test_exact_cancellation_gives_zero(self):
        x = LogReal.from_float(2.5)
        assert (x - x).sign == 0

    def test_signed_logsumexp(self):
        vals = [3.0, -1.0, 0.5, -2.499]
        got = signed_logsumexp(np.log(np.abs(vals)), np.sign(vals)).to_float()
        assert got == pytest.approx(sum(vals), rel=1e-12)


class TestRegIncGammaQ:
    def test_q_1_1_is_exp_minus_1(self):
        assert reg_inc_gamma_q(1.0, 1.0) == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_negative_half_vs_quadrature(self):
        oracle = tail_quad(lambda t: t ** (-1.5) * np.exp(-t), 1.0) / sp.gamma(-0.5)
        assert reg_inc_gamma_q(-0.5, 1.0) == pytest.approx(oracle, rel=1e-10)

    def test_recursion_identity(self):
        # Q(-a, z) = Q(1-a, z) - z^{-a} e^{-z} / Gamma(1-a), here a=0.3, z=2.
        lhs = reg_inc_gamma_q(-0.3, 2.0)
        rhs = reg_inc_gamma_q(0.7, 2.0) - 2.0 ** (-0.3) * math.exp(-2.0) / sp.gamma(0.7)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    @pytest.mark.parametrize("a", [0.1, 0.3, 0.5, 0.7, 0.9])
    @pytest.mark.parametrize("z", [0.01, 0.1, 1.0, 10.0])
    def test_grid_vs_quadrature(self, a, z):
        oracle = tail_quad(lambda t: t ** (-1.0 - a) * np.exp(-t), z) / sp.gamma(-a)
        assert reg_inc_gamma_q(-a, z) == pytest.approx(oracle, rel=1e-8)

    def test_far_tail_no_overflow(self):
        q = reg_inc_gamma_q(0.5, 700.0)
        assert 0.0 < q < 1e-100

    def test_deep_negative_argument(self):
        got = reg_inc_gamma_q(-2.5, 1.0)
        oracle = tail_quad(lambda t: t ** (-3.5) * np.exp(-t), 1.0) / sp.gamma(-2.5)
        assert got == pytest.approx(oracle, rel=1e-9)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            reg_inc_gamma_q(-1.0, 2.0)
        with pytest.raises(ValueError):
            reg_inc_gamma_q(0.0, 2.0)
        with pytest.raises(ValueError):
            reg_inc_gamma_q(0.5, -1.0)


class TestGammaUpperLog:
    @pytest.mark.parametrize("x", [-0.5, -2.0, -3.7, -17.3, 0.4, 3.0])
    def test_vs_quadrature(self, x):
        got = gamma_upper_log(x, 1.5)
        oracle = tail_quad(lambda t: t ** (x - 1.0) * np.exp(-t), 1.5)
        assert got.sign == 1
        assert got.log_magnitude == pytest.approx(math.log(oracle), abs=1e-9)

    def test_integer_arguments(self):
        # Gamma(0, z) = E_1(z); Gamma(-2, z) by two recursion steps
        assert gamma_upper_log(0.0, 2.0).to_float() == pytest.approx(sp.exp1(2.0), rel=1e-12)
        oracle = tail_quad(lambda t: t ** (-3.0) * np.exp(-t), 2.0)
        assert gamma_upper_log(-2.0, 2.0).to_float() == pytest.approx(oracle, rel=1e-10)

    def test_large_z_stays_finite_in_log(self):
        got = gamma_upper_log(-2.0, 1e4)
        # Gamma(-2, z) ~ z^{-3} e^{-z} for large z
        assert got.log_magnitude == pytest.approx(-3 * math.log(1e4) - 1e4, abs=0.01)


class TestAbsQNeg:
    @pytest.mark.parametrize("a", [0.1, 0.5, 0.9])
    @pytest.mark.parametrize("z", [0.01, 0.1, 1.0, 10.0, 30.0, 200.0])
    def test_matches_levy_tail_integral(self, a, z):
        rho = lambda t: (a / sp.gamma(1.0 - a)) * t ** (-1.0 - a) * np.exp(-t)
        oracle = tail_quad(rho, z)
        assert abs_q_neg(a, z) == pytest.approx(oracle, rel=1e-8)

    def test_vectorized(self):
        z = np.array([0.1, 1.0, 5.0, 100.0])
        vals = abs_q_neg(0.5, z)
        assert vals.shape == z.shape
        assert np.all(np.diff(vals) < 0)


class TestRisingFactorial:
    def test_empty_product(self):
        assert rising_factorial_log(0.5, 0).to_float() == 1.0

    def test_direct_small_cases(self):
        assert rising_factorial_log(0.5, 3).to_float() == pytest.approx(1.875, rel=1e-14)
        assert rising_factorial_log(0.8, 3).to_float() == pytest.approx(4.032, rel=1e-14)

    @given(st.floats(min_value=1e-3, max_value=1.0), st.integers(min_value=0, max_value=20))
    def test_log_domain_equals_direct_product(self, x, n):
        direct = 1.0
        for j in range(n):
            direct *= x + j
        assert rising_factorial_log(x, n).to_float() == pytest.approx(direct, rel=1e-12)

    def test_negative_start_tracks_sign(self):
        # (-1.5)_2 = (-1.5)(-0.5) = 0.75
        assert rising_factorial_log(-1.5, 2).to_float() == pytest.approx(0.75, rel=1e-12)


def partitions_into_blocks(items):
    """All set partitions of a list, as lists of blocks."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in partitions_into_blocks(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def stirling_by_enumeration(n, k, a):
    total = 0.0
    for part in partitions_into_blocks(list(range(n))):
        if len(part) != k:
            continue
        prod = 1.0
        for block in part:
            for j in range(len(block) - 1):
                prod *= (1.0 - a) + j
        total += prod
    return total


class TestGeneralizedStirling:
    def test_base_case(self):
        assert generalized_stirling(1, 1, 0.5).to_float() == 1.0

    @pytest.mark.parametrize("a", [0.25, 0.5, 0.75])
    @pytest.mark.parametrize("n", [2, 4, 7])
    def test_all_singletons(self, a, n):
        assert generalized_stirling(n, n, a).to_float() == pytest.approx(1.0, rel=1e-12)

    def test_three_two_half(self):
        assert generalized_stirling(3, 2, 0.5).to_float() == pytest.approx(1.5, rel=1e-12)

    @pytest.mark.parametrize("a", [0.25, 0.5, 0.75])
    def test_recursion_equals_enumeration(self, a):
        for n in range(1, 9):
            for k in range(1, n + 1):
                oracle = stirling_by_enumeration(n, k, a)
                got = generalized_stirling(n, k, a).to_float()
                assert got == pytest.approx(oracle, rel=1e-10), (n, k, a)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            generalized_stirling(3, 0, 0.5)
        with pytest.raises(ValueError):
            generalized_stirling(3, 4, 0.5)
