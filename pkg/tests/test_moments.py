import math

import numpy as np
import pytest
from scipy import integrate

from nrmkit import moments as mo
from nrmkit.moments import DpExponent, MomentQuery, NggExponent


class TestExponents:
    def test_ngg_exp_integral_matches_quadrature(self):
        e = NggExponent(0.5)
        for v, c in [(0.5, 1.0), (3.0, 2.0), (10.0, 1e-8), (2.0, 1e-4), (100.0, 0.3)]:
            direct, _ = integrate.quad(lambda w: math.exp(-c * e.psi(w)), 0, v, limit=200)
            assert e.exp_integral(v, c) == pytest.approx(direct, rel=1e-9), (v, c)

    def test_dp_exp_integral(self):
        e = DpExponent()
        for v, c in [(0.5, 1.0), (3.0, 2.5)]:
            direct, _ = integrate.quad(lambda w: (1.0 + w) ** (-c), 0, v)
            assert e.exp_integral(v, c) == pytest.approx(direct, rel=1e-10)


class TestMean:
    def test_is_base_mass(self):
        assert mo.nrm_mean(MomentQuery(a=0.5, mass=2.0, p_b=0.3)) == 0.3
        assert mo.nrm_mean(MomentQuery(a=0.5, mass=2.0, p_b=1.0)) == 1.0

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(0)
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, op="mean")
        r = mo.monte_carlo_moments(q, 10_000, rng)
        assert abs(r.mean - 0.3) < 3 * r.mean_se


class TestVariance:
    def test_dp_closed_form(self):
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, family="dp")
        r = mo.nrm_variance(q)
        assert r.quadrature == pytest.approx(0.3 * 0.7 / 3.0, rel=1e-8)

    def test_ngg_closed_form_vs_quadrature(self):
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3)
        r = mo.nrm_variance(q)
        assert r.closed_form == pytest.approx(r.quadrature, rel=1e-6)

    def test_large_mass_asymptote(self):
        p, a, mass = 0.3, 0.5, 1e4
        r = mo.nrm_variance(MomentQuery(a=a, mass=mass, p_b=p), check_tol=1e-4)
        asym = p * (1 - p) * (1 - a) / (mass * a)
        assert abs(r.closed_form - asym) / asym < 0.02

    def test_vanishes_at_degenerate_sets(self):
        for p in (0.0, 1.0):
            r = mo.nrm_variance(MomentQuery(a=0.4, mass=1.0, p_b=p))
            assert abs(r.value) < 1e-12

    def test_monte_carlo_variance(self):
        rng = np.random.default_rng(1)
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, op="var")
        want = mo.nrm_variance(q).value
        r = mo.monte_carlo_moments(q, 10_000, rng)
        assert abs(r.second - want) < 3 * r.second_se


class TestCovSuperposition:
    def test_single_component_limit_is_variance(self):
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, masses=(1.0, 1e-8), op="super")
        var = mo.nrm_variance(MomentQuery(a=0.5, mass=1.0, p_b=0.3)).value
        assert mo.cov_superposition(q) == pytest.approx(var, rel=1e-4)

    @pytest.mark.parametrize("masses,k", [((1.0, 1.0), 0), ((2.0, 0.5, 0.5), 0),
                                          ((2.0, 0.5, 0.5), 1)])
    def test_dp_analytic_value(self, masses, k):
        # for the DP the mixing proportions are independent of the components:
        # Cov(mu_k(B), mu(B)) = (M_k/M) Var(mu_k(B)) = (M_k/M) P(1-P)/(M_k+1)
        p = 0.3
        q = MomentQuery(a=0.5, mass=0.0, p_b=p, masses=masses, component=k, family="dp")
        m_k, m_tot = masses[k], sum(masses)
        want = (m_k / m_tot) * p * (1 - p) / (m_k + 1.0)
        assert mo.cov_superposition(q) == pytest.approx(want, rel=1e-8)

    def test_cauchy_schwarz(self):
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, masses=(1.0, 1.0), op="super")
        cov = mo.cov_superposition(q)
        v1 = mo.nrm_variance(MomentQuery(a=0.5, mass=1.0, p_b=0.3)).value
        v2 = mo.nrm_variance(MomentQuery(a=0.5, mass=2.0, p_b=0.3)).value
        assert abs(cov) <= math.sqrt(v1 * v2)

    def test_monte_carlo(self):
        rng = np.random.default_rng(2)
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, masses=(1.0, 1.0), op="super")
        want = mo.cov_superposition(q)
        r = mo.monte_carlo_moments(q, 20_000, rng)
        assert abs(r.second - want) < 3 * r.second_se


class TestCovSubsampling:
    def test_q_to_one_is_variance(self):
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, q=1 - 1e-8, op="sub")
        var = mo.nrm_variance(MomentQuery(a=0.5, mass=2.0, p_b=0.3)).value
        assert mo.cov_subsampling(q) == pytest.approx(var, rel=1e-4)

    def test_structural_identity_with_superposition(self):
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, q=0.5, op="sub")
        via_super = mo.cov_superposition(
            MomentQuery(a=0.5, mass=2.0, p_b=0.3, masses=(1.0, 1.0), op="super"))
        assert mo.cov_subsampling(q) == pytest.approx(via_super, rel=1e-8)

    def test_monte_carlo(self):
        rng = np.random.default_rng(3)
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, q=0.5, op="sub")
        want = mo.cov_subsampling(q)
        r = mo.monte_carlo_moments(q, 20_000, rng)
        assert abs(r.second - want) < 3 * r.second_se


class TestCovTransition:
    def test_zero_source_mass(self):
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, p_a=0.0, op="trans")
        assert mo.cov_transition(q) == 0.0

    def test_dp_value(self):
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, p_a=0.2, op="trans", family="dp")
        assert mo.cov_transition(q) == pytest.approx(-0.2 * 0.3 / 3.0, rel=1e-10)

    def test_negative_at_large_mass(self):
        q = MomentQuery(a=0.5, mass=50.0, p_b=0.3, p_a=0.2, op="trans")
        assert mo.cov_transition(q) < 0.0

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, p_a=0.2, op="trans")
        want = mo.cov_transition(q)
        r = mo.monte_carlo_moments(q, 20_000, rng)
        assert abs(r.second - want) < 3 * r.second_se


class TestMonteCarloPlumbing:
    def test_needs_enough_reps(self):
        with pytest.raises(ValueError):
            mo.monte_carlo_moments(MomentQuery(a=0.5, mass=1.0, p_b=0.3), 50,
                                   np.random.default_rng(0))

    def test_reproducible(self):
        q = MomentQuery(a=0.5, mass=1.0, p_b=0.3, op="var")
        r1 = mo.monte_carlo_moments(q, 500, np.random.default_rng(9))
        r2 = mo.monte_carlo_moments(q, 500, np.random.default_rng(9))
        assert (r1.mean, r1.second) == (r2.mean, r2.second)

    def test_dp_family_variance(self):
        # DP surrogate Monte Carlo against the DP closed form
        rng = np.random.default_rng(5)
        q = MomentQuery(a=0.5, mass=2.0, p_b=0.3, op="var", family="dp")
        r = mo.monte_carlo_moments(q, 5_000, rng)
        want = 0.3 * 0.7 / 3.0
        assert abs(r.second - want) < 3 * r.second_se

    def test_query_validation(self):
        with pytest.raises(ValueError):
            MomentQuery(a=0.5, mass=1.0, p_b=1.4)
        with pytest.raises(ValueError):
            MomentQuery(a=0.5, mass=1.0, p_b=0.5, p_a=0.7)
