"""Tests for analytic targets: posteriors, scores, and expectations."""

import math

import numpy as np
import pytest

from diffverify.schedule import sigma_sq
from diffverify.streams import substream
from diffverify.targets import (
    FiniteMixtureTarget,
    GaussianTarget,
    expectation_1d,
    expected_trace_sigma,
    expected_trace_sigma_sq,
    noisy_sample,
    point_mass,
    sample_data,
    standard_gaussian,
    tensor_product,
    two_point_mixture,
)

HALF_LOG2 = 0.5 * math.log(2.0)


def fd_score(target, x, t, h=1e-4):
    """Central finite difference of log q_t, the independent score oracle."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (target.log_marginal(x + e, t) - target.log_marginal(x - e, t)) / (2 * h)
    return out


def fd_hessian(target, x, t, h=1e-4):
    """Second central difference of log q_t."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    out = np.empty((d, d))
    f0 = target.log_marginal(x, t)
    for i in range(d):
        for j in range(d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h
            ej[j] = h
            if i == j:
                out[i, i] = (
                    target.log_marginal(x + ei, t) - 2 * f0 + target.log_marginal(x - ei, t)
                ) / h**2
            else:
                out[i, j] = (
                    target.log_marginal(x + ei + ej, t)
                    - target.log_marginal(x + ei - ej, t)
                    - target.log_marginal(x - ei + ej, t)
                    + target.log_marginal(x - ei - ej, t)
                ) / (4 * h**2)
    return out


class TestConstruction:
    def test_covariance_forms(self):
        g1 = GaussianTarget([0.0, 0.0], 2.0)
        g2 = GaussianTarget([0.0, 0.0], [2.0, 2.0])
        g3 = GaussianTarget([0.0, 0.0], 2.0 * np.eye(2))
        np.testing.assert_array_equal(g1.cov, g2.cov)
        np.testing.assert_array_equal(g1.cov, g3.cov)

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError):
            GaussianTarget([0.0, 0.0], [[1.0, 0.5], [0.2, 1.0]])

    def test_indefinite_covariance_rejected(self):
        with pytest.raises(ValueError):
            GaussianTarget([0.0], [[-1.0]])

    def test_point_mass_flag(self):
        assert point_mass([2.0, -1.0]).is_point_mass
        assert not standard_gaussian(2).is_point_mass

    def test_normalized_flag(self):
        assert standard_gaussian(3).is_normalized
        assert not GaussianTarget([0.0], [[2.0]]).is_normalized
        assert two_point_mixture().is_normalized  # atoms at +-1, unit variance

    def test_mixture_weight_validation(self):
        with pytest.raises(ValueError):
            FiniteMixtureTarget([0.5, 0.6], [point_mass(0.0), point_mass(1.0)])
        with pytest.raises(ValueError):
            FiniteMixtureTarget([0.5, 0.5], [point_mass(0.0), point_mass([1.0, 2.0])])

    def test_tensor_product_block_structure(self):
        base = GaussianTarget([0.7], [[1.3]])
        prod = tensor_product(base, 3)
        assert prod.dim == 3
        np.testing.assert_allclose(prod.cov, 1.3 * np.eye(3))
        np.testing.assert_allclose(prod.mean, [0.7, 0.7, 0.7])


class TestPosteriorMoments:
    def test_standard_gaussian_reference(self):
        # Joint-Gaussian conditioning gives m = e^{-t} x, cov = sigma_t^2 here.
        tgt = standard_gaussian(1)
        pm = tgt.posterior_moments(np.array([0.7]), HALF_LOG2)
        assert pm.mean[0] == pytest.approx(0.7 / math.sqrt(2.0), rel=1e-12)
        assert pm.cov[0, 0] == pytest.approx(0.5, rel=1e-12)

    def test_point_mass_posterior_is_itself(self):
        tgt = point_mass([2.0, -1.0])
        for t in (0.01, 0.5, 3.0):
            pm = tgt.posterior_moments(np.array([0.3, 0.9]), t)
            np.testing.assert_array_equal(pm.mean, [2.0, -1.0])
            np.testing.assert_array_equal(pm.cov, np.zeros((2, 2)))

    def test_symmetric_mixture_at_origin(self):
        tgt = two_point_mixture()
        for t in (0.1, 1.0, 5.0):
            pm = tgt.posterior_moments(np.array([0.0]), t)
            assert pm.mean[0] == pytest.approx(0.0, abs=1e-14)
            assert pm.cov[0, 0] == pytest.approx(1.0, rel=1e-12)

    def test_time_zero_rejected(self):
        with pytest.raises(ValueError):
            standard_gaussian(1).posterior_moments(np.array([0.0]), 0.0)

    def test_nonfinite_point_rejected(self):
        with pytest.raises(ValueError):
            standard_gaussian(1).posterior_moments(np.array([np.nan]), 1.0)

    def test_batched_shapes(self):
        tgt = two_point_mixture()
        x = np.linspace(-2, 2, 7)[:, None]
        pm = tgt.posterior_moments(x, 0.5)
        assert pm.mean.shape == (7, 1)
        assert pm.cov.shape == (7, 1, 1)

    def test_posterior_cov_psd_and_trace_bound(self):
        rng = substream(3)
        tgt = FiniteMixtureTarget(
            [0.3, 0.7],
            [GaussianTarget([-1.0, 0.5], 0.2 * np.eye(2)), GaussianTarget([1.0, -0.5], [[0.5, 0.1], [0.1, 0.3]])],
        )
        x = rng.standard_normal((50, 2)) * 2.0
        for t in (0.05, 0.8, 3.0):
            pm = tgt.posterior_moments(x, t)
            evals = np.linalg.eigvalsh(pm.cov)
            assert evals.min() > -1e-10
            # trace(cov) <= conditional second moment = trace(cov) + |mean|^2
            tr = np.trace(pm.cov, axis1=-2, axis2=-1)
            cond_sq = tr + np.sum(pm.mean**2, axis=-1)
            assert np.all(tr <= cond_sq + 1e-12)


class TestScore:
    def test_standard_gaussian_score_is_negative_x(self):
        tgt = standard_gaussian(3)
        x = np.array([0.3, -1.2, 2.0])
        for t in (0.05, 0.7, 4.0):
            np.testing.assert_allclose(tgt.score(x, t), -x, rtol=1e-12)

    def test_point_mass_score(self):
        tgt = point_mass([0.0, 0.0])
        x = np.array([0.4, -0.2])
        t = 0.6
        np.testing.assert_allclose(tgt.score(x, t), -x / sigma_sq(t), rtol=1e-12)

    def test_mixture_score_matches_finite_difference(self):
        tgt = two_point_mixture()
        x = np.array([0.3])
        got = tgt.score(x, 0.5)
        np.testing.assert_allclose(got, fd_score(tgt, x, 0.5), atol=1e-5)

    def test_gaussian_score_two_routes(self):
        # Posterior-mean assembly vs direct Gaussian-marginal gradient.
        tgt = GaussianTarget([0.5, -0.3], [[1.5, 0.4], [0.4, 0.8]])
        t = 0.8
        x = np.array([0.9, 0.1])
        marg_cov = math.exp(-2 * t) * tgt.cov + sigma_sq(t) * np.eye(2)
        direct = -np.linalg.solve(marg_cov, x - math.exp(-t) * tgt.mean)
        np.testing.assert_allclose(tgt.score(x, t), direct, rtol=1e-12)

    def test_quadrature_target_score_identity_two_routes(self):
        # d = 1 mixture: Tweedie assembly against the marginal-density gradient.
        tgt = FiniteMixtureTarget(
            [0.4, 0.6], [GaussianTarget([-0.8], [[0.3]]), GaussianTarget([1.2], [[0.6]])]
        )
        for t in (0.1, 0.9):
            for xv in (-1.0, 0.2, 1.5):
                x = np.array([xv])
                np.testing.assert_allclose(tgt.score(x, t), fd_score(tgt, x, t, h=1e-5), atol=1e-6)


class TestScoreHessian:
    def test_standard_gaussian_hessian(self):
        tgt = standard_gaussian(2)
        for t in (0.2, 1.0, 3.0):
            np.testing.assert_allclose(tgt.score_hessian(np.zeros(2), t), -np.eye(2), rtol=1e-12)

    def test_point_mass_hessian(self):
        tgt = point_mass([1.0])
        t = 0.4
        np.testing.assert_allclose(
            tgt.score_hessian(np.array([0.2]), t), [[-1.0 / sigma_sq(t)]], rtol=1e-12
        )

    def test_mixture_hessian_matches_finite_difference(self):
        tgt = two_point_mixture()
        x = np.array([0.3])
        got = tgt.score_hessian(x, 0.5)
        np.testing.assert_allclose(got, fd_hessian(tgt, x, 0.5), atol=1e-4)

    def test_hessian_eigenvalue_floor(self):
        # Eigenvalues never drop below -1/sigma_t^2 because the posterior
        # covariance is positive semidefinite.
        tgt = two_point_mixture()
        t = 0.7
        for xv in (-2.0, 0.0, 0.5, 3.0):
            h = tgt.score_hessian(np.array([xv]), t)
            assert np.linalg.eigvalsh(h).min() >= -1.0 / sigma_sq(t) - 1e-12


class TestExpectations:
    def test_gaussian_trace_closed_form(self):
        tgt = standard_gaussian(3)
        for t in (0.1, 1.0):
            est = expected_trace_sigma(tgt, t)
            assert est.std_err == 0.0
            assert est.value == pytest.approx(3.0 * sigma_sq(t), rel=1e-12)

    def test_point_mass_trace_zero(self):
        assert expected_trace_sigma(point_mass([1.0, 2.0]), 0.5).value == 0.0

    def test_small_time_bound(self):
        # E[trace] <= d e^{2t} sigma_t^2 <= 16 d t for t <= 1, any target.
        t = 0.05
        for tgt in (standard_gaussian(2), point_mass([0.3]), two_point_mixture()):
            est = expected_trace_sigma(tgt, t, budget=20_000, rng=substream(5))
            assert est.value <= 16.0 * tgt.dim * t

    def test_quadrature_matches_monte_carlo(self):
        tgt = two_point_mixture()
        t = 0.5
        quad = expected_trace_sigma(tgt, t, method="quadrature")
        mc = expected_trace_sigma(tgt, t, method="monte-carlo", budget=200_000, rng=substream(7))
        assert abs(quad.value - mc.value) <= 4.0 * mc.std_err

    def test_trace_sq_quadrature(self):
        tgt = two_point_mixture()
        t = 0.5
        quad = expected_trace_sigma_sq(tgt, t, method="quadrature")
        mc = expected_trace_sigma_sq(tgt, t, method="monte-carlo", budget=200_000, rng=substream(8))
        assert abs(quad.value - mc.value) <= 4.0 * mc.std_err

    def test_closed_form_rejected_for_mixture(self):
        with pytest.raises(ValueError):
            expected_trace_sigma(two_point_mixture(), 0.5, method="closed-form")

    def test_trace_nondecreasing_in_time(self):
        ts = np.geomspace(1e-3, 5.0, 40)
        gauss_vals = [expected_trace_sigma(GaussianTarget([0.2], [[0.7]]), t).value for t in ts]
        assert np.all(np.diff(gauss_vals) >= -1e-14)
        mix = two_point_mixture()
        mix_vals = [expected_trace_sigma(mix, t, method="quadrature").value for t in ts[::4]]
        assert np.all(np.diff(mix_vals) >= -1e-8)

    def test_total_variance_decomposition(self):
        # E[trace posterior cov] + E|posterior mean|^2 = E|x_0|^2 over q_t.
        tgt = two_point_mixture()
        t = 0.5
        second = float(np.trace(tgt.second_moment()))
        lhs = expected_trace_sigma(tgt, t, method="quadrature").value
        mean_sq = expectation_1d(
            tgt, t, lambda x: np.sum(tgt.posterior_moments(x, t).mean ** 2, axis=-1)
        )
        assert lhs + mean_sq == pytest.approx(second, abs=1e-8)

    def test_unit_covariance_second_moment(self):
        # E|x_0|^2 = d for normalized targets.
        g = standard_gaussian(4)
        assert np.trace(g.second_moment()) == pytest.approx(4.0, rel=1e-10)
        mix = two_point_mixture()
        x = sample_data(mix, 100_000, substream(9))
        second = float(np.mean(np.sum(x**2, axis=1)))
        se = float(np.std(np.sum(x**2, axis=1), ddof=1) / math.sqrt(x.shape[0]))
        assert abs(second - 1.0) <= 3.0 * se + 1e-12


class TestSampling:
    def test_point_mass_copies(self):
        x = sample_data(point_mass([2.0, -1.0]), 3, substream(1))
        np.testing.assert_array_equal(x, np.tile([2.0, -1.0], (3, 1)))

    def test_gaussian_clt_envelope(self):
        n, d = 100_000, 3
        x = sample_data(standard_gaussian(d), n, substream(2))
        assert np.all(np.abs(x.mean(axis=0)) <= 3.0 * math.sqrt(1.0 / n))

    def test_mixture_frequencies(self):
        n = 100_000
        mix = FiniteMixtureTarget([0.3, 0.7], [point_mass(-2.0), point_mass(2.0)])
        x = sample_data(mix, n, substream(4))
        freq_low = float(np.mean(x[:, 0] < 0))
        assert abs(freq_low - 0.3) <= 3.0 * math.sqrt(0.21 / n)

    def test_sample_count_validated(self):
        with pytest.raises(ValueError):
            sample_data(standard_gaussian(1), 0, substream(1))

    def test_noisy_sample_time_zero(self):
        tgt = point_mass([1.5])
        x = noisy_sample(tgt, 0.0, 5, substream(6))
        np.testing.assert_array_equal(x, np.full((5, 1), 1.5))


class TestQuadratureEngine:
    def test_total_mass(self):
        tgt = two_point_mixture()
        val = expectation_1d(tgt, 0.5, lambda x: np.ones(x.shape[0]))
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_second_moment_of_marginal(self):
        # Var(x_t) = e^{-2t} Var(x_0) + sigma_t^2; both components unit-variance target.
        tgt = two_point_mixture()
        t = 0.7
        val = expectation_1d(tgt, t, lambda x: x[:, 0] ** 2)
        expected = math.exp(-2 * t) * 1.0 + sigma_sq(t)
        assert val == pytest.approx(expected, rel=1e-9)

    def test_rejects_multivariate(self):
        with pytest.raises(ValueError):
            expectation_1d(standard_gaussian(2), 0.5, lambda x: np.ones(x.shape[0]))
