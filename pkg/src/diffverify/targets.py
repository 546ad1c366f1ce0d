"""Analytic target laws with tractable noisy marginals and posteriors.

Under the forward kernel ``x_t | x_0 ~ N(x_0 e^{-t}, sigma_t^2 I)`` every
target implemented here (Gaussians, point masses as zero-covariance
Gaussians, and finite Gaussian mixtures) has a closed-form noisy marginal
``q_t``, closed-form posterior moments of ``x_0`` given ``x_t``, and hence
an exact score assembled through the posterior-mean (Tweedie) identity

    grad log q_t(x) = -x / sigma_t^2 + e^{-t} m_t(x) / sigma_t^2,

with the matching Hessian identity in terms of the posterior covariance.
Expectations over ``q_t`` are available in closed form (Gaussians), by
adaptive Gauss-Legendre quadrature (one-dimensional targets), or by
Monte Carlo.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import logsumexp

from .schedule import sigma_sq
from .streams import as_rng

__all__ = [
    "PosteriorMoments",
    "GaussianTarget",
    "FiniteMixtureTarget",
    "Estimate",
    "standard_gaussian",
    "point_mass",
    "two_point_mixture",
    "tensor_product",
    "sample_data",
    "noisy_sample",
    "expected_trace_sigma",
    "expected_trace_sigma_sq",
    "expectation_1d",
]

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class PosteriorMoments:
    """Posterior mean and covariance of the clean point given a noisy one."""

    mean: np.ndarray
    cov: np.ndarray


class Estimate(NamedTuple):
    """A scalar estimate with its Monte-Carlo standard error (0 if exact)."""

    value: float
    std_err: float
    method: str


def _check_time(t: float) -> float:
    t = float(t)
    if not t > 0:
        raise ValueError("conditioning on the noisy point requires t > 0")
    return t


def _check_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"points have dimension {x.shape[-1]}, target has {dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    return x


class GaussianTarget:
    """Gaussian data law ``N(mean, cov)``; zero covariance encodes a point mass.

    The covariance is stored through its eigendecomposition (eigenvalues
    clamped at zero, no jitter) so that degenerate directions keep exact
    posterior formulas: the noisy marginal ``e^{-2t} C + sigma_t^2 I`` is
    always positive definite for ``t > 0``.
    """

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.size
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match dimension {d}")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > _SYM_TOL * scale:
            raise ValueError("covariance must be symmetric")
        evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
        if evals.min() < -1e-10 * scale:
            raise ValueError("covariance must be positive semidefinite")
        self.mean = mean
        self.cov = 0.5 * (cov + cov.T)
        self._evals = np.clip(evals, 0.0, None)
        self._evecs = evecs

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_point_mass(self) -> bool:
        return bool(self._evals.max() == 0.0) if self._evals.size else True

    @property
    def is_normalized(self) -> bool:
        """Whether the covariance is the identity (the usual normalization)."""
        return bool(np.abs(self.cov - np.eye(self.dim)).max() <= 1e-10)

    def covariance(self) -> np.ndarray:
        return self.cov

    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)

    def sample(self, n: int, rng) -> np.ndarray:
        rng = as_rng(rng)
        z = rng.standard_normal((int(n), self.dim))
        return self.mean + z @ (self._evecs * np.sqrt(self._evals)).T

    # -- noisy marginal ---------------------------------------------------

    def _noisy_eigs(self, t: float) -> tuple[float, float, np.ndarray]:
        """Decay factor, noise variance, and marginal eigenvalues at time t."""
        decay = np.exp(-t)
        s2 = sigma_sq(t)
        return decay, s2, decay * decay * self._evals + s2

    def log_marginal(self, x, t: float) -> np.ndarray:
        """Log density of the noisy marginal ``q_t`` at ``x``."""
        t = _check_time(t)
        x = _check_points(x, self.dim)
        decay, _, eigs = self._noisy_eigs(t)
        y = (x - decay * self.mean) @ self._evecs
        out = -0.5 * np.sum(y * y / eigs, axis=-1) - 0.5 * np.sum(np.log(2.0 * np.pi * eigs))
        return out

    def _posterior_cov(self, t: float) -> np.ndarray:
        """State-independent posterior covariance at time ``t``, shape (d, d)."""
        _, s2, eigs = self._noisy_eigs(t)
        cov_eigs = self._evals * s2 / eigs
        return (self._evecs * cov_eigs) @ self._evecs.T

    def posterior_moments(self, x, t: float) -> PosteriorMoments:
        """Exact conditioning of the clean point on a noisy observation.

        The gain is formed in the covariance eigenbasis, so point masses and
        other degenerate directions come out exactly (zero posterior spread).
        """
        t = _check_time(t)
        x = _check_points(x, self.dim)
        decay, _, eigs = self._noisy_eigs(t)
        y = (x - decay * self.mean) @ self._evecs
        gain = decay * self._evals / eigs
        mean = self.mean + (gain * y) @ self._evecs.T
        cov = self._posterior_cov(t)
        if x.ndim > 1:
            cov = np.broadcast_to(cov, x.shape[:-1] + (self.dim, self.dim))
        return PosteriorMoments(mean, cov)

    def score(self, x, t: float) -> np.ndarray:
        """Exact score of the noisy marginal via the posterior mean."""
        t = _check_time(t)
        x = _check_points(x, self.dim)
        s2 = sigma_sq(t)
        m = self.posterior_moments(x, t).mean
        return (-x + np.exp(-t) * m) / s2

    def score_hessian(self, x, t: float) -> np.ndarray:
        """Exact Hessian of ``log q_t`` via the posterior covariance."""
        t = _check_time(t)
        x = _check_points(x, self.dim)
        s2 = sigma_sq(t)
        cov = self.posterior_moments(x, t).cov
        return -np.eye(self.dim) / s2 + (np.exp(-2.0 * t) / s2**2) * cov

    # -- closed-form expectations over q_t --------------------------------

    def trace_sigma_exact(self, t: float) -> float:
        """``E[trace of posterior covariance]`` (state-independent here)."""
        t = _check_time(t)
        _, s2, eigs = self._noisy_eigs(t)
        return float(np.sum(self._evals * s2 / eigs))

    def trace_sigma_sq_exact(self, t: float) -> float:
        t = _check_time(t)
        _, s2, eigs = self._noisy_eigs(t)
        return float(np.sum((self._evals * s2 / eigs) ** 2))

    def expected_score_norm_exact(self, t: float) -> float:
        """``E ||grad log q_t||^2 = trace(S_t^{-1})`` for a Gaussian marginal."""
        t = _check_time(t)
        _, _, eigs = self._noisy_eigs(t)
        return float(np.sum(1.0 / eigs))

    def expected_hessian_frob_exact(self, t: float) -> float:
        """``E ||hess log q_t||_F^2 = trace(S_t^{-2})`` for a Gaussian marginal."""
        t = _check_time(t)
        _, _, eigs = self._noisy_eigs(t)
        return float(np.sum(1.0 / eigs**2))


class FiniteMixtureTarget:
    """Finite mixture of Gaussian components (point masses allowed).

    Posterior moments are the responsibility-weighted component posteriors
    plus the between-component spread; responsibilities are always computed
    in the log domain because component likelihoods separate astronomically
    at small noise and become nearly equal at large noise.
    """

    def __init__(self, weights, components):
        weights = np.asarray(weights, dtype=float)
        components = list(components)
        if weights.ndim != 1 or len(components) != weights.size or not components:
            raise ValueError("need one weight per component and at least one component")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > _SYM_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")
        self.weights = weights
        self.components = components

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def is_atomic(self) -> bool:
        return all(c.is_point_mass for c in self.components)

    @property
    def is_normalized(self) -> bool:
        return bool(np.abs(self.covariance() - np.eye(self.dim)).max() <= 1e-10)

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Locations and weights, for finite-support (all point mass) mixtures."""
        if not self.is_atomic:
            raise ValueError("target is not purely atomic")
        return np.stack([c.mean for c in self.components]), self.weights.copy()

    def mean_vector(self) -> np.ndarray:
        return self.weights @ np.stack([c.mean for c in self.components])

    def second_moment(self) -> np.ndarray:
        return sum(w * c.second_moment() for w, c in zip(self.weights, self.components))

    def covariance(self) -> np.ndarray:
        m = self.mean_vector()
        return self.second_moment() - np.outer(m, m)

    def sample(self, n: int, rng) -> np.ndarray:
        rng = as_rng(rng)
        n = int(n)
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for i, comp in enumerate(self.components):
            mask = idx == i
            if mask.any():
                out[mask] = comp.sample(int(mask.sum()), rng)
        return out

    def _log_responsibilities(self, x, t: float) -> np.ndarray:
        parts = np.stack(
            [np.log(w) + c.log_marginal(x, t) for w, c in zip(self.weights, self.components)],
            axis=-1,
        )
        return parts - logsumexp(parts, axis=-1, keepdims=True)

    def log_marginal(self, x, t: float) -> np.ndarray:
        t = _check_time(t)
        x = _check_points(x, self.dim)
        parts = np.stack(
            [np.log(w) + c.log_marginal(x, t) for w, c in zip(self.weights, self.components)],
            axis=-1,
        )
        return logsumexp(parts, axis=-1)

    def posterior_moments(self, x, t: float) -> PosteriorMoments:
        t = _check_time(t)
        x = _check_points(x, self.dim)
        resp = np.exp(self._log_responsibilities(x, t))              # (..., m)
        means = np.stack(
            [c.posterior_moments(x, t).mean for c in self.components], axis=-2
        )                                                            # (..., m, d)
        mean = np.einsum("...m,...md->...d", resp, means)
        # Within-component covariances are state-independent per component.
        covs = np.stack([c._posterior_cov(t) for c in self.components])  # (m, d, d)
        spread = means - mean[..., None, :]
        cov = (
            np.einsum("...m,mij->...ij", resp, covs)
            + np.einsum("...m,...mi,...mj->...ij", resp, spread, spread)
        )
        return PosteriorMoments(mean, cov)

    def score(self, x, t: float) -> np.ndarray:
        t = _check_time(t)
        x = _check_points(x, self.dim)
        s2 = sigma_sq(t)
        m = self.posterior_moments(x, t).mean
        return (-x + np.exp(-t) * m) / s2

    def score_hessian(self, x, t: float) -> np.ndarray:
        t = _check_time(t)
        x = _check_points(x, self.dim)
        s2 = sigma_sq(t)
        cov = self.posterior_moments(x, t).cov
        return -np.eye(self.dim) / s2 + (np.exp(-2.0 * t) / s2**2) * cov


# -- constructors ---------------------------------------------------------


def standard_gaussian(d: int) -> GaussianTarget:
    return GaussianTarget(np.zeros(int(d)), np.eye(int(d)))


def point_mass(location) -> GaussianTarget:
    location = np.atleast_1d(np.asarray(location, dtype=float))
    return GaussianTarget(location, np.zeros((location.size, location.size)))


def two_point_mixture(weights=(0.5, 0.5), locations=(-1.0, 1.0)) -> FiniteMixtureTarget:
    comps = [point_mass(loc) for loc in locations]
    return FiniteMixtureTarget(np.asarray(weights, dtype=float), comps)


def tensor_product(target: GaussianTarget, copies: int) -> GaussianTarget:
    """Independent product of ``copies`` replicas of a Gaussian target."""
    copies = int(copies)
    if copies < 1:
        raise ValueError("need at least one copy")
    d = target.dim
    mean = np.tile(target.mean, copies)
    cov = np.zeros((d * copies, d * copies))
    for i in range(copies):
        cov[i * d : (i + 1) * d, i * d : (i + 1) * d] = target.cov
    return GaussianTarget(mean, cov)


# -- operations over targets ----------------------------------------------


def sample_data(target, n: int, rng) -> np.ndarray:
    """I.i.d. draws from the target law."""
    if int(n) < 1:
        raise ValueError("need at least one sample")
    return target.sample(int(n), rng)


def noisy_sample(target, t: float, n: int, rng) -> np.ndarray:
    """Exact draws from the noisy marginal ``q_t`` (t = 0 returns clean data)."""
    rng = as_rng(rng)
    t = float(t)
    if t < 0:
        raise ValueError("time must be nonnegative")
    x0 = target.sample(int(n), rng)
    return np.exp(-t) * x0 + np.sqrt(sigma_sq(t)) * rng.standard_normal(x0.shape)


def expectation_1d(target, t: float, f, tol: float = 1e-8, max_doublings: int = 12) -> float:
    """Deterministic ``E[f(x)]`` over ``q_t`` for one-dimensional targets.

    Composite Gauss-Legendre over +-12 marginal standard deviations around
    every component, with panel doubling until successive values agree to
    ``tol``.  The integrands used here are smooth and light-tailed, so this
    converges after a few doublings.
    """
    if target.dim != 1:
        raise ValueError("quadrature expectations are implemented for d = 1 only")
    t = _check_time(t)
    comps = target.components if isinstance(target, FiniteMixtureTarget) else [target]
    decay = np.exp(-t)
    s2 = sigma_sq(t)
    centers = np.array([decay * c.mean[0] for c in comps])
    stds = np.array([np.sqrt(decay**2 * c.cov[0, 0] + s2) for c in comps])
    lo = float(np.min(centers - 12.0 * stds))
    hi = float(np.max(centers + 12.0 * stds))
    nodes16, weights16 = leggauss(16)
    n_panels = 8
    prev = None
    for _ in range(max_doublings + 1):
        edges = np.linspace(lo, hi, n_panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        xs = (mid[:, None] + half[:, None] * nodes16).ravel()
        ws = (half[:, None] * weights16).ravel()
        density = np.exp(target.log_marginal(xs[:, None], t))
        val = float(np.sum(ws * density * np.asarray(f(xs[:, None]), dtype=float)))
        if prev is not None and abs(val - prev) <= tol * max(1.0, abs(val)):
            return val
        prev = val
        n_panels *= 2
    raise RuntimeError("quadrature failed to converge; integrand may be too rough")


def _trace_of_posterior_cov(target, x: np.ndarray, t: float) -> np.ndarray:
    cov = target.posterior_moments(x, t).cov
    return np.trace(cov, axis1=-2, axis2=-1)


def _trace_of_posterior_cov_sq(target, x: np.ndarray, t: float) -> np.ndarray:
    cov = target.posterior_moments(x, t).cov
    return np.einsum("...ij,...ji->...", cov, cov)


def _expected_trace(target, t, method, budget, rng, power: int) -> Estimate:
    t = _check_time(t)
    if method == "auto":
        if isinstance(target, GaussianTarget):
            method = "closed-form"
        elif target.dim == 1:
            method = "quadrature"
        else:
            method = "monte-carlo"
    per_point = _trace_of_posterior_cov if power == 1 else _trace_of_posterior_cov_sq
    if method == "closed-form":
        if not isinstance(target, GaussianTarget):
            raise ValueError("closed form is available for Gaussian targets only")
        value = target.trace_sigma_exact(t) if power == 1 else target.trace_sigma_sq_exact(t)
        return Estimate(value, 0.0, "closed-form")
    if method == "quadrature":
        value = expectation_1d(target, t, lambda x: per_point(target, x, t))
        return Estimate(value, 0.0, "quadrature")
    if method == "monte-carlo":
        rng = as_rng(rng if rng is not None else 0)
        x = noisy_sample(target, t, int(budget), rng)
        vals = per_point(target, x, t)
        return Estimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size)), "monte-carlo")
    raise ValueError(f"unknown method {method!r}")


def expected_trace_sigma(target, t: float, method: str = "auto", budget: int = 100_000, rng=None) -> Estimate:
    """``E[trace of posterior covariance]`` over the noisy marginal at time t."""
    return _expected_trace(target, t, method, budget, rng, power=1)


def expected_trace_sigma_sq(target, t: float, method: str = "auto", budget: int = 100_000, rng=None) -> Estimate:
    """``E[trace of squared posterior covariance]`` over the noisy marginal."""
    return _expected_trace(target, t, method, budget, rng, power=2)
