import math

import numpy as np
import pytest
from scipy import integrate, special as sp, stats

from nrmkit import levy_core as lc


def rho(a, t):
    return (a / sp.gamma(1.0 - a)) * t ** (-1.0 - a) * np.exp(-t)


def tail_quad(f, lo, span=80.0):
    return integrate.quad(f, lo, lo + span, limit=300)[0]


def realization_sums(counts, flat):
    idx = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sums = np.add.reduceat(np.concatenate([flat, [0.0]]), idx)
    sums[counts == 0] = 0.0
    return sums


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            lc.NggParams(1.2, 1.0)
        with pytest.raises(ValueError):
            lc.NggParams(0.5, -1.0)


class TestLaplaceExponent:
    def test_at_zero(self):
        assert lc.laplace_exponent(lc.NggParams(0.3, 2.0), 0.0) == 0.0

    def test_closed_form_point(self):
        assert lc.laplace_exponent(lc.NggParams(0.5, 1.0), 3.0) == pytest.approx(1.0, rel=1e-14)

    def test_dp_limit(self):
        p = lc.NggParams(0.001, 2.0)
        v = 1.0
        ratio = lc.laplace_exponent(p, v) / (p.mass * p.a)
        assert abs(ratio - math.log(1.0 + v)) < 1e-3

    def test_diverges(self):
        # psi -> inf as v -> inf; past (1+v)^a = 1e6 the exponent exceeds
        # 1e6 * M for every a >= 0.1 (v = 1e60 covers the slowest case).
        for a in (0.1, 0.5, 0.9):
            p = lc.NggParams(a, 1.5)
            assert lc.laplace_exponent(p, 1e60) > (1e6 - 1) * p.mass
            assert lc.laplace_exponent(p, 1e12) > lc.laplace_exponent(p, 1e6) > 0

    @pytest.mark.parametrize("a,mass,v", [(0.3, 1.0, 0.5), (0.5, 2.0, 1.0), (0.8, 0.7, 3.0)])
    def test_derivatives_match_finite_differences(self, a, mass, v):
        p = lc.NggParams(a, mass)
        h = 1e-5
        fd1 = (lc.laplace_exponent(p, v + h) - lc.laplace_exponent(p, v - h)) / (2 * h)
        assert lc.laplace_exponent_d1(p, v) == pytest.approx(fd1, rel=1e-6)
        # second difference needs a larger step or roundoff ~ eps/h^2 dominates
        h2 = 1e-3
        fd2 = (lc.laplace_exponent(p, v + h2) - 2 * lc.laplace_exponent(p, v)
               + lc.laplace_exponent(p, v - h2)) / h2 ** 2
        assert lc.laplace_exponent_d2(p, v) == pytest.approx(fd2, rel=1e-5)


class TestTailIntegrals:
    def test_tail_mass_monotone(self):
        p = lc.NggParams(0.5, 2.0)
        assert lc.tail_mass(p, 0.1) > lc.tail_mass(p, 0.5) > lc.tail_mass(p, 2.0)

    def test_tail_mass_quadrature(self):
        p = lc.NggParams(0.5, 1.0)
        oracle = tail_quad(lambda t: rho(0.5, t), 1.0)
        assert lc.tail_mass(p, 1.0) == pytest.approx(oracle, rel=1e-10)

    def test_tail_mass_vanishes(self):
        assert lc.tail_mass(lc.NggParams(0.5, 1.0), 200.0) < 1e-12

    def test_tilted_reduces_to_tail_at_v0(self):
        p = lc.NggParams(0.4, 1.5)
        assert lc.exp_tilted_tail(p, 0.0, 0.3) == pytest.approx(lc.tail_mass(p, 0.3), rel=1e-14)

    def test_tilted_decreasing_in_v(self):
        p = lc.NggParams(0.4, 1.5)
        vals = [lc.exp_tilted_tail(p, v, 0.3) for v in (0.0, 0.5, 1.0, 2.0)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_tilted_quadrature(self):
        p = lc.NggParams(0.5, 2.0)
        oracle = tail_quad(lambda t: 2.0 * np.exp(-t) * rho(0.5, t), 0.5)
        assert lc.exp_tilted_tail(p, 1.0, 0.5) == pytest.approx(oracle, rel=1e-8)

    def test_truncated_zero_at_v0(self):
        p = lc.NggParams(0.3, 1.0)
        assert lc.truncated_exponent(p, 0.0, 0.5) == pytest.approx(0.0, abs=1e-14)

    def test_truncated_reaches_laplace_exponent(self):
        p = lc.NggParams(0.3, 1.0)
        got = lc.truncated_exponent(p, 2.0, 200.0)
        assert got == pytest.approx(lc.laplace_exponent(p, 2.0), abs=1e-10)

    def test_truncated_quadrature(self):
        p = lc.NggParams(0.3, 1.0)
        oracle = integrate.quad(lambda t: (1 - np.exp(-2.0 * t)) * rho(0.3, t),
                                1e-12, 0.1, limit=300)[0]
        assert lc.truncated_exponent(p, 2.0, 0.1) == pytest.approx(oracle, rel=1e-8)

    def test_identity_with_pieces(self):
        p = lc.NggParams(0.6, 1.3)
        v, L = 1.7, 0.25
        combo = lc.laplace_exponent(p, v) - (lc.tail_mass(p, L) - lc.exp_tilted_tail(p, v, L))
        assert lc.truncated_exponent(p, v, L) == pytest.approx(combo, rel=1e-12)


class TestInversion:
    def test_round_trip(self):
        p = lc.NggParams(0.5, 1.0)
        targets = np.array([1e-8, 1e-3, 0.5, 5.0, 500.0, 2e5])
        back = lc.tail_mass(p, lc.invert_tail_mass(p, targets))
        assert np.max(np.abs(back - targets) / targets) < 1e-10

    def test_rejects_bad_targets(self):
        with pytest.raises(lc.NumericalError):
            lc.invert_tail_mass(lc.NggParams(0.5, 1.0), np.array([-1.0]))


class TestThresholdSampler:
    def test_all_jumps_above_threshold(self):
        rng = np.random.default_rng(0)
        crm = lc.sample_crm_threshold(lc.NggParams(0.5, 5.0), lc.uniform_base(1), 0.1, rng)
        assert np.all(crm.jumps > 0.1)

    def test_poisson_mean_matches_tail_mass(self):
        rng = np.random.default_rng(1)
        p = lc.NggParams(0.5, 2.0)
        counts, _ = lc.sample_jump_batch_above(p, 0.05, rng, 10_000, method="inverse")
        target = lc.tail_mass(p, 0.05)
        se = counts.std() / math.sqrt(counts.size)
        assert abs(counts.mean() - target) < 3 * se

    def test_rejection_matches_inverse_in_distribution(self):
        rng = np.random.default_rng(2)
        p = lc.NggParams(0.5, 2.0)
        _, j1 = lc.sample_jump_batch_above(p, 0.05, rng, 3000, method="rejection")
        _, j2 = lc.sample_jump_batch_above(p, 0.05, rng, 3000, method="inverse")
        assert stats.ks_2samp(j1, j2).pvalue > 1e-4

    def test_huge_threshold_gives_empty(self):
        rng = np.random.default_rng(3)
        p = lc.NggParams(0.5, 1.0)
        assert lc.tail_mass(p, 60.0) < 1e-10
        counts, _ = lc.sample_jump_batch_above(p, 60.0, rng, 200, method="inverse")
        assert counts.sum() == 0


class TestDecreasingSampler:
    def test_strictly_decreasing(self):
        rng = np.random.default_rng(4)
        crm = lc.sample_crm_decreasing(lc.NggParams(0.5, 1.0), lc.uniform_base(1), 500, rng)
        assert np.all(np.diff(crm.jumps) < 0)

    def test_count_above_level_matches_tail_mass(self):
        rng = np.random.default_rng(5)
        p = lc.NggParams(0.5, 5.0)
        z = 0.1
        n_real, k_max = 2000, 40
        counts = np.empty(n_real)
        for i in range(n_real):
            crm = lc.sample_crm_decreasing(p, lc.uniform_base(1), k_max, rng)
            assert crm.jumps[-1] < z  # k_max deep enough for the count to be complete
            counts[i] = np.sum(crm.jumps > z)
        target = lc.tail_mass(p, z)
        se = counts.std() / math.sqrt(n_real)
        assert abs(counts.mean() - target) < 3 * se

    def test_mean_total_jump_matches_exponent_derivative(self):
        rng = np.random.default_rng(6)
        p = lc.NggParams(0.5, 1.0)
        n_real = 300
        totals = np.array([lc.sample_crm_decreasing(p, lc.uniform_base(1), 10_000, rng).total_mass
                           for _ in range(n_real)])
        target = lc.laplace_exponent_d1(p, 0.0)  # = M a, tail beyond 1e4 jumps negligible
        se = totals.std() / math.sqrt(n_real)
        assert abs(totals.mean() - target) < 3 * se


class TestLaplaceFunctional:
    def test_threshold_realizations_match_levy_khintchine(self):
        rng = np.random.default_rng(7)
        p = lc.NggParams(0.5, 1.0)
        z = 1e-6
        counts, flat = lc.sample_jump_batch_above(p, z, rng, 10_000, method="rejection")
        sums = realization_sums(counts, flat)
        for v in (0.5, 1.0, 2.0):
            emp = np.exp(-v * sums)
            target = math.exp(-(lc.laplace_exponent(p, v) - lc.truncated_exponent(p, v, z)))
            se = emp.std() / math.sqrt(emp.size)
            assert abs(emp.mean() - target) < 3 * se, v


class TestNormalize:
    def test_single_atom(self):
        crm = lc.CrmRealization(lc.NggParams(0.5, 1.0), [2.3], [[0.5]], [1])
        assert lc.normalize(crm).weights.tolist() == [1.0]

    def test_two_atoms(self):
        crm = lc.CrmRealization(lc.NggParams(0.5, 1.0), [1.0, 3.0], [[0.1], [0.2]], [1, 2])
        assert lc.normalize(crm).weights.tolist() == [0.25, 0.75]

    def test_scale_invariance(self):
        crm = lc.CrmRealization(lc.NggParams(0.5, 1.0), [0.3, 0.9, 1.1], [[0.1], [0.2], [0.3]], [1, 2, 3])
        lam = 17.3
        scaled = lc.CrmRealization(crm.params, crm.jumps * lam, crm.locations, crm.ids)
        assert np.allclose(lc.normalize(crm).weights, lc.normalize(scaled).weights, rtol=1e-14)

    def test_empty_errors(self):
        crm = lc.CrmRealization(lc.NggParams(0.5, 1.0), np.empty(0), np.empty((0, 1)), np.empty(0))
        with pytest.raises(ValueError):
            lc.normalize(crm)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(8)
        crm = lc.sample_crm_threshold(lc.NggParams(0.7, 3.0), lc.uniform_base(2), 0.01, rng)
        nrm = lc.normalize(crm)
        assert abs(nrm.weights.sum() - 1.0) < 1e-12


class TestSerialization:
    def test_bit_exact_round_trip(self):
        rng = np.random.default_rng(9)
        crm = lc.sample_crm_threshold(lc.NggParams(0.5, 2.0), lc.gaussian_base(0.0, 1.0, 2), 0.05, rng)
        back = lc.crm_from_json(lc.crm_to_json(crm))
        assert np.array_equal(back.jumps, crm.jumps)
        assert np.array_equal(back.locations, crm.locations)
        assert np.array_equal(back.ids, crm.ids)
        assert back.params == crm.params
        assert back.truncation == crm.truncation

    def test_schema_fields(self):
        import json
        rng = np.random.default_rng(10)
        crm = lc.sample_crm_threshold(lc.NggParams(0.5, 2.0), lc.uniform_base(1), 0.5, rng)
        obj = json.loads(lc.crm_to_json(crm))
        assert set(obj) == {"params", "atoms", "truncation"}
        assert set(obj["params"]) == {"a", "mass"}
        for atom in obj["atoms"]:
            assert {"jump", "location"} <= set(atom)


class TestBaseMeasures:
    def test_uniform_density_integrates_to_one(self):
        base = lc.uniform_base(1)
        grid = np.linspace(0.0, 1.0, 2001).reshape(-1, 1)
        vals = np.exp(base.log_density(grid))
        assert np.trapezoid(vals, grid[:, 0]) == pytest.approx(1.0, abs=1e-6)

    def test_gaussian_density_integrates_to_one(self):
        base = lc.gaussian_base(0.5, 2.0, 1)
        grid = np.linspace(-20, 21, 4001).reshape(-1, 1)
        vals = np.exp(base.log_density(grid))
        assert np.trapezoid(vals, grid[:, 0]) == pytest.approx(1.0, abs=1e-6)
