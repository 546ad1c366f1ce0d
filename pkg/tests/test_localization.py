"""Tests for the observation-localization dynamics and their diffusion view."""

import math

import numpy as np
import pytest

from diffverify.localization import (
    atom_mass_quadrature,
    check_covariance_ode,
    check_density_martingale,
    check_localization_equivalence,
    sl_direct_path,
    sl_drift,
    sl_posterior_direct,
    sl_sde_path,
)
from diffverify.schedule import sigma_sq
from diffverify.streams import substream
from diffverify.targets import (
    FiniteMixtureTarget,
    GaussianTarget,
    point_mass,
    standard_gaussian,
    two_point_mixture,
)


class TestDirectPath:
    def test_starts_at_zero(self):
        path = sl_direct_path(standard_gaussian(2), np.array([0.0, 0.5, 1.0]), 100, substream(1))
        np.testing.assert_array_equal(path.states[:, 0, :], 0.0)

    def test_variance_growth(self):
        # Var(U_s) = s^2 Var(x) + s = s(s+1) per coordinate for a unit target.
        n = 100_000
        s_grid = np.array([0.0, 0.5, 1.0, 4.0])
        path = sl_direct_path(standard_gaussian(1), s_grid, n, substream(2))
        for j, s in enumerate(s_grid[1:], start=1):
            expected = s * (s + 1.0)
            var = path.states[:, j, 0].var(ddof=1)
            assert abs(var - expected) <= 3 * expected * math.sqrt(2.0 / n)

    def test_normalized_observation_converges(self):
        # |U_s / s - x_*|^2 has mean d/s.
        n, s = 100_000, 100.0
        tgt = standard_gaussian(2)
        rng = substream(3)
        x_star = tgt.sample(n, rng)
        u = s * x_star + math.sqrt(s) * rng.standard_normal((n, 2))
        err = np.sum((u / s - x_star) ** 2, axis=1)
        se = err.std(ddof=1) / math.sqrt(n)
        assert abs(err.mean() - 2.0 / s) <= 3 * se

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            sl_direct_path(standard_gaussian(1), np.array([0.5, 1.0]), 10, substream(4))
        with pytest.raises(ValueError):
            sl_direct_path(standard_gaussian(1), np.array([0.0, 1.0, 1.0]), 10, substream(4))


class TestDrift:
    def test_point_mass_drift_is_location(self):
        tgt = point_mass([1.5, -2.0])
        for s in (0.1, 1.0, 50.0):
            out = sl_drift(tgt, np.array([3.0, 4.0]), s)
            np.testing.assert_allclose(out.mean, [1.5, -2.0], rtol=1e-12)
            np.testing.assert_allclose(out.cov, 0.0, atol=1e-15)

    def test_standard_gaussian_drift(self):
        # Direct conditioning gives a = u/(1+s) and cov = I/(1+s).
        tgt = standard_gaussian(2)
        u = np.array([0.7, -1.1])
        for s in (0.2, 1.0, 9.0):
            out = sl_drift(tgt, u, s)
            np.testing.assert_allclose(out.mean, u / (1.0 + s), rtol=1e-12)
            np.testing.assert_allclose(out.cov, np.eye(2) / (1.0 + s), rtol=1e-12)

    def test_time_change_matches_direct_conditioning_gaussian(self):
        tgt = GaussianTarget([0.4, -0.6], [[1.1, 0.2], [0.2, 0.7]])
        rng = substream(5)
        u = rng.standard_normal((10, 2)) * 2.0
        for s in (0.05, 0.8, 20.0):
            via_t = sl_drift(tgt, u, s)
            direct = sl_posterior_direct(tgt, u, s)
            np.testing.assert_allclose(via_t.mean, direct.mean, rtol=1e-11, atol=1e-13)
            np.testing.assert_allclose(via_t.cov, direct.cov, rtol=1e-11, atol=1e-13)

    def test_time_change_matches_direct_conditioning_mixture(self):
        tgt = FiniteMixtureTarget(
            [0.3, 0.7],
            [GaussianTarget([-1.0], [[0.4]]), GaussianTarget([1.5], [[0.2]])],
        )
        u = np.linspace(-3, 3, 9)[:, None]
        for s in (0.1, 1.0, 10.0):
            via_t = sl_drift(tgt, u, s)
            direct = sl_posterior_direct(tgt, u, s)
            np.testing.assert_allclose(via_t.mean, direct.mean, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(via_t.cov, direct.cov, rtol=1e-10, atol=1e-12)

    def test_zero_s_rejected(self):
        with pytest.raises(ValueError):
            sl_drift(standard_gaussian(1), np.array([0.0]), 0.0)


class TestSdePath:
    def test_point_mass_em_is_exact(self):
        # Constant drift makes Euler-Maruyama exact at any resolution:
        # U_s ~ N(s x_*, s I) up to the tiny initialization offset.
        n, s_max = 50_000, 2.0
        tgt = point_mass([1.0])
        path = sl_sde_path(tgt, s_max, 32, n, substream(6))
        end = path.states[:, -1, 0]
        assert abs(end.mean() - s_max * 1.0) <= 3 * math.sqrt(s_max / n) + 1e-3
        assert abs(end.var(ddof=1) - s_max) <= 3 * s_max * math.sqrt(2.0 / n) + 1e-3

    def test_gaussian_variance_converges(self):
        n, s_max = 100_000, 4.0
        tgt = standard_gaussian(1)
        path = sl_sde_path(tgt, s_max, 4096, n, substream(7))
        var = path.states[:, -1, 0].var(ddof=1)
        expected = s_max * (s_max + 1.0)
        assert abs(var - expected) <= 3 * expected * math.sqrt(2.0 / n)

    def test_weak_order_one(self):
        # Halving the step roughly halves the end-variance error.
        n, s_max = 200_000, 4.0
        tgt = standard_gaussian(1)
        expected = s_max * (s_max + 1.0)
        errors = []
        for k, nsub in enumerate((32, 64, 128)):
            path = sl_sde_path(tgt, s_max, nsub, n, substream(8, k))
            errors.append(abs(path.states[:, -1, 0].var(ddof=1) - expected))
        for coarse, fine in zip(errors, errors[1:]):
            assert 1.5 <= coarse / fine <= 3.0, errors

    def test_validation(self):
        with pytest.raises(ValueError):
            sl_sde_path(standard_gaussian(1), 2000.0, 8, 10, substream(9))
        with pytest.raises(ValueError):
            sl_sde_path(standard_gaussian(1), 1.0, 0, 10, substream(9))


class TestEquivalence:
    def test_gaussian_and_point_mass(self):
        for tgt, tag in ((standard_gaussian(2), 10), (point_mass([0.5, -0.5]), 11)):
            rows = check_localization_equivalence(tgt, [0.5, 1.0, 4.0], 100_000, substream(tag))
            assert rows, "no comparison rows produced"
            assert max(abs(r.z_score) for r in rows) <= 4.0

    def test_variance_value(self):
        # Both sides must carry variance s(s+1) for the unit Gaussian.
        rows = check_localization_equivalence(standard_gaussian(1), [1.0], 100_000, substream(12))
        var_rows = [r for r in rows if r.quantity == "cov[0,0]"]
        assert var_rows and var_rows[0].lhs == pytest.approx(2.0, rel=0.05)

    def test_nonpositive_s_rejected(self):
        with pytest.raises(ValueError):
            check_localization_equivalence(standard_gaussian(1), [-1.0], 100, substream(13))


class TestCovarianceOde:
    def test_gaussian_closed_form_exact(self):
        tgt = GaussianTarget([0.3], [[0.8]])
        rows = check_covariance_ode(tgt, [0.05, 0.5, 1.0, 3.0], method="closed-form")
        for r in rows:
            assert abs(r.lhs - r.rhs) <= 1e-10 * max(1.0, abs(r.rhs)), r

    def test_standard_gaussian_value(self):
        # Posterior trace sigma_t^2 per coordinate gives lhs = rhs = sigma_t^4 d.
        rows = check_covariance_ode(standard_gaussian(2), [0.7], method="closed-form")
        t_row = [r for r in rows if r.quantity == "cov-decay-t"][0]
        assert t_row.rhs == pytest.approx(2.0 * sigma_sq(0.7) ** 2, rel=1e-12)

    def test_point_mass_trivial(self):
        rows = check_covariance_ode(point_mass([1.0]), [0.5], method="closed-form")
        for r in rows:
            assert r.lhs == 0.0 and r.rhs == 0.0

    def test_mixture_quadrature(self):
        rows = check_covariance_ode(two_point_mixture(), [0.25, 0.5, 1.0], method="quadrature", h=1e-4)
        for r in rows:
            assert abs(r.lhs - r.rhs) <= 1e-4 * max(1.0, abs(r.rhs)), r

    def test_monte_carlo_with_common_noise(self):
        tgt = FiniteMixtureTarget(
            [0.5, 0.5],
            [GaussianTarget([-1.0, 0.0], 0.3 * np.eye(2)), GaussianTarget([1.0, 0.0], 0.3 * np.eye(2))],
        )
        rows = check_covariance_ode(tgt, [0.5], method="monte-carlo", budget=200_000, rng=substream(14))
        for r in rows:
            assert abs(r.z_score) <= 4.0, r

    def test_stencil_validation(self):
        with pytest.raises(ValueError):
            check_covariance_ode(standard_gaussian(1), [1e-6], method="closed-form", h=1e-4)


class TestDensityMartingale:
    def test_prior_recovered_at_zero(self):
        rows = check_density_martingale(two_point_mixture(), [0.0], 100, substream(15))
        for r in rows:
            assert r.lhs == r.rhs

    def test_symmetric_two_point(self):
        rows = check_density_martingale(two_point_mixture(), [1.0], 100_000, substream(16))
        for r in rows:
            assert r.rhs == 0.5
            assert abs(r.z_score) <= 3.0

    def test_asymmetric_weights(self):
        tgt = FiniteMixtureTarget([0.3, 0.7], [point_mass(-1.0), point_mass(2.0)])
        rows = check_density_martingale(tgt, [2.0], 100_000, substream(17))
        assert {r.rhs for r in rows} == {0.3, 0.7}
        assert max(abs(r.z_score) for r in rows) <= 3.0

    def test_quadrature_oracle_confirms_martingale(self):
        # Deterministic check: integrating the posterior mass against the
        # observation marginal returns the prior weight.
        tgt = FiniteMixtureTarget([0.3, 0.7], [point_mass(-1.0), point_mass(2.0)])
        for s in (1.0, 2.0):
            for j, w in enumerate((0.3, 0.7)):
                assert atom_mass_quadrature(tgt, s, j) == pytest.approx(w, abs=1e-8)

    def test_non_atomic_rejected(self):
        with pytest.raises(ValueError):
            check_density_martingale(standard_gaussian(1), [1.0], 10, substream(18))

    def test_localizes_at_large_s(self):
        # By s = 50 the posterior has collapsed onto the true atom.
        n = 20_000
        tgt = two_point_mixture()
        rng = substream(19)
        x_star = tgt.sample(n, rng)
        s = 50.0
        u = s * x_star + math.sqrt(s) * rng.standard_normal((n, 1))
        locs, w = tgt.atoms()
        log_mass = np.log(w) + u @ locs.T - 0.5 * s * np.sum(locs**2, axis=1)
        log_mass -= log_mass.max(axis=1, keepdims=True)
        mass = np.exp(log_mass)
        mass /= mass.sum(axis=1, keepdims=True)
        assert mass.max(axis=1).mean() >= 0.99


class TestPosteriorFunctionalIdentities:
    def test_expected_cov_decomposition(self):
        # E[posterior cov] = E[x x^T] - E[a a^T] over observation randomness.
        n, s = 200_000, 1.0
        tgt = two_point_mixture()
        rng = substream(20)
        x_star = tgt.sample(n, rng)
        u = s * x_star + math.sqrt(s) * rng.standard_normal((n, 1))
        post = sl_posterior_direct(tgt, u, s)
        lhs = post.cov.mean(axis=0)
        second = tgt.second_moment()
        a_outer = np.einsum("ni,nj->nij", post.mean, post.mean)
        rhs = second - a_outer.mean(axis=0)
        se = np.hypot(
            post.cov.std(axis=0, ddof=1), a_outer.std(axis=0, ddof=1)
        ) / math.sqrt(n)
        assert np.all(np.abs(lhs - rhs) <= 3 * se + 1e-12)

    def test_expected_cov_loewner_monotone(self):
        # E[posterior cov] shrinks (in semidefinite order) as s grows.
        n = 200_000
        tgt = FiniteMixtureTarget(
            [0.4, 0.6],
            [GaussianTarget([-1.0, 0.3], 0.3 * np.eye(2)), GaussianTarget([1.0, -0.3], 0.5 * np.eye(2))],
        )
        rng = substream(21)
        estimates = []
        for s in (0.25, 0.5, 1.0, 2.0, 4.0):
            x_star = tgt.sample(n, rng)
            u = s * x_star + math.sqrt(s) * rng.standard_normal((n, 2))
            post = sl_posterior_direct(tgt, u, s)
            mean_cov = post.cov.mean(axis=0)
            entry_se = post.cov.std(axis=0, ddof=1).max() / math.sqrt(n)
            estimates.append((mean_cov, entry_se))
        for (big, se_b), (small, se_s) in zip(estimates, estimates[1:]):
            diff = big - small
            tol = 3 * (se_b + se_s) * 2  # Loewner slack from entrywise noise
            assert np.linalg.eigvalsh(diff).min() >= -tol
