"""Observation-driven localization dynamics and their diffusion equivalence.

The localization process attached to a target law draws a hidden point and
accumulates Brownian observations ``U_s = s x_* + W_s``.  The posterior of
the hidden point given ``U_s`` concentrates as ``s`` grows, and the same
observation path solves the drift-form SDE ``dU = a_s(U) ds + dW`` where
``a_s`` is the posterior mean.  Under the reparametrization
``t(s) = log(1 + 1/s)/2`` the observation process equals
``sqrt(s (s+1))`` times the noisy forward marginal at time ``t(s)``, which
identifies the posterior mean/covariance here with the denoising posterior
moments of the targets module.  The ``check_*`` functions quantify each of
these claims numerically and report (lhs, rhs, std_err, z) rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import logsumexp

from .schedule import inverse_time_change, sigma, sigma_dot, time_change
from .streams import as_rng, substream
from .targets import (
    FiniteMixtureTarget,
    GaussianTarget,
    expected_trace_sigma,
    expected_trace_sigma_sq,
    noisy_sample,
)
from .report import CheckRow

__all__ = [
    "LocalizationPath",
    "PosteriorFunctionals",
    "sl_direct_path",
    "sl_drift",
    "sl_posterior_direct",
    "sl_sde_path",
    "check_localization_equivalence",
    "check_covariance_ode",
    "check_density_martingale",
    "atom_mass_quadrature",
]

_S_MAX_CAP = 1e3


@dataclass(frozen=True)
class LocalizationPath:
    """Observation trajectories at a shared increasing grid of s-values."""

    s_grid: np.ndarray
    states: np.ndarray
    tag: str

    def __post_init__(self):
        s_grid = np.asarray(self.s_grid, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[1] != s_grid.size:
            raise ValueError("states must have shape (n_paths, n_times, d)")
        if s_grid.size and s_grid[0] == 0.0 and np.any(states[:, 0, :] != 0.0):
            raise ValueError("observations at s = 0 must be zero")
        object.__setattr__(self, "s_grid", s_grid)
        object.__setattr__(self, "states", states)


@dataclass(frozen=True)
class PosteriorFunctionals:
    """Posterior mean and covariance of the hidden point given observations."""

    mean: np.ndarray
    cov: np.ndarray


def sl_direct_path(target, s_grid, n: int, rng) -> LocalizationPath:
    """Sample the observation process directly: hidden point plus Brownian noise."""
    rng = as_rng(rng)
    s_grid = np.asarray(s_grid, dtype=float)
    if s_grid.ndim != 1 or s_grid.size == 0 or s_grid[0] != 0.0:
        raise ValueError("s_grid must be 1-d, increasing, and start at 0")
    if np.any(np.diff(s_grid) <= 0):
        raise ValueError("s_grid must be strictly increasing")
    n = int(n)
    x_star = target.sample(n, rng)
    states = np.zeros((n, s_grid.size, target.dim))
    w = np.zeros((n, target.dim))
    for j in range(1, s_grid.size):
        ds = s_grid[j] - s_grid[j - 1]
        w = w + np.sqrt(ds) * rng.standard_normal((n, target.dim))
        states[:, j, :] = s_grid[j] * x_star + w
    return LocalizationPath(s_grid, states, "direct")


def sl_drift(target, u, s: float) -> PosteriorFunctionals:
    """Posterior mean/covariance of the hidden point, via the time change.

    Maps the observation to a noisy forward point ``x_t = u / sqrt(s(s+1))``
    at ``t = time_change(s)`` and reads off the denoising posterior moments.
    """
    s = float(s)
    if s <= 0:
        raise ValueError("localization time must be positive")
    t = time_change(s)
    u = np.asarray(u, dtype=float)
    x_t = u / np.sqrt(s * (s + 1.0))
    pm = target.posterior_moments(x_t, t)
    return PosteriorFunctionals(pm.mean, pm.cov)


def sl_posterior_direct(target, u, s: float) -> PosteriorFunctionals:
    """Posterior moments by direct conditioning in observation coordinates.

    Independent of the time-change route: tilts the target by
    ``exp(x . u - s |x|^2 / 2)``, i.e. conditions on ``u = s x + w`` with
    ``w ~ N(0, s I)``.  Used to cross-check :func:`sl_drift`.
    """
    s = float(s)
    if s <= 0:
        raise ValueError("localization time must be positive")
    u = np.asarray(u, dtype=float)
    if isinstance(target, GaussianTarget):
        return _gaussian_obs_posterior(target, u, s)
    log_resp = np.stack(
        [np.log(w) + _obs_log_marginal(c, u, s) for w, c in zip(target.weights, target.components)],
        axis=-1,
    )
    log_resp = log_resp - logsumexp(log_resp, axis=-1, keepdims=True)
    resp = np.exp(log_resp)
    means = np.stack([_gaussian_obs_posterior(c, u, s).mean for c in target.components], axis=-2)
    mean = np.einsum("...m,...md->...d", resp, means)
    # Within-component posterior covariances do not depend on the observation.
    covs = np.stack([_gaussian_obs_cov(c, s) for c in target.components])
    spread = means - mean[..., None, :]
    cov = (
        np.einsum("...m,mij->...ij", resp, covs)
        + np.einsum("...m,...mi,...mj->...ij", resp, spread, spread)
    )
    return PosteriorFunctionals(mean, cov)


def _gaussian_obs_cov(comp: GaussianTarget, s: float) -> np.ndarray:
    lam = comp._evals
    vec = comp._evecs
    return (vec * (lam / (s * lam + 1.0))) @ vec.T


def _gaussian_obs_posterior(comp: GaussianTarget, u: np.ndarray, s: float) -> PosteriorFunctionals:
    # Observation u = s x + w, w ~ N(0, s I): gain and posterior spread in
    # the component eigenbasis, exact for degenerate directions.
    lam = comp._evals
    vec = comp._evecs
    denom = s * lam + 1.0
    y = (u - s * comp.mean) @ vec
    mean = comp.mean + ((lam / denom) * y) @ vec.T
    cov = _gaussian_obs_cov(comp, s)
    if u.ndim > 1:
        cov = np.broadcast_to(cov, u.shape[:-1] + cov.shape)
    return PosteriorFunctionals(mean, cov)


def _obs_log_marginal(comp: GaussianTarget, u: np.ndarray, s: float) -> np.ndarray:
    # Marginal of u = s x + w for one Gaussian component: N(s mu, s^2 C + s I).
    lam = comp._evals
    vec = comp._evecs
    eigs = s * s * lam + s
    y = (u - s * comp.mean) @ vec
    return -0.5 * np.sum(y * y / eigs, axis=-1) - 0.5 * np.sum(np.log(2.0 * np.pi * eigs))


def sl_sde_path(target, s_max: float, n_substeps: int, n: int, rng, s_min: float = 1e-4) -> LocalizationPath:
    """Euler-Maruyama integration of the drift-form observation SDE.

    Uses a geometric s-grid (the drift stiffens with s and the dynamics span
    decades) starting from ``N(0, s_min I)``, the small-s law to first order.
    Weak error in the moments decays like one over the substep count.
    """
    rng = as_rng(rng)
    s_max = float(s_max)
    n_substeps = int(n_substeps)
    if s_max <= 0:
        raise ValueError("s_max must be positive")
    if s_max > _S_MAX_CAP:
        raise ValueError(f"s_max capped at {_S_MAX_CAP:g}; posterior masses underflow beyond")
    if n_substeps < 1:
        raise ValueError("need at least one substep")
    if s_min <= 0 or s_min >= s_max:
        raise ValueError("s_min must lie in (0, s_max)")
    n = int(n)
    s_grid = np.geomspace(s_min, s_max, n_substeps + 1)
    states = np.empty((n, s_grid.size, target.dim))
    u = np.sqrt(s_min) * rng.standard_normal((n, target.dim))
    states[:, 0, :] = u
    for j in range(n_substeps):
        ds = s_grid[j + 1] - s_grid[j]
        drift = sl_drift(target, u, float(s_grid[j])).mean
        u = u + drift * ds + np.sqrt(ds) * rng.standard_normal((n, target.dim))
        states[:, j + 1, :] = u
    return LocalizationPath(s_grid, states, "sde")


def _moment_rows(s: float, lhs: np.ndarray, rhs: np.ndarray, n: int) -> list[CheckRow]:
    """Mean and covariance comparison rows for two equal-size sample sets."""
    rows = []
    d = lhs.shape[1]
    m1, m2 = lhs.mean(axis=0), rhs.mean(axis=0)
    se1 = lhs.std(axis=0, ddof=1) / np.sqrt(n)
    se2 = rhs.std(axis=0, ddof=1) / np.sqrt(n)
    for j in range(d):
        se = float(np.hypot(se1[j], se2[j]))
        z = float((m1[j] - m2[j]) / se) if se > 0 else 0.0
        rows.append(CheckRow(s, f"mean[{j}]", float(m1[j]), float(m2[j]), se, z))
    c1 = lhs - m1
    c2 = rhs - m2
    for i in range(d):
        for j in range(i, d):
            p1 = c1[:, i] * c1[:, j]
            p2 = c2[:, i] * c2[:, j]
            se = float(np.hypot(p1.std(ddof=1), p2.std(ddof=1)) / np.sqrt(n))
            z = float((p1.mean() - p2.mean()) / se) if se > 0 else 0.0
            rows.append(CheckRow(s, f"cov[{i},{j}]", float(p1.mean()), float(p2.mean()), se, z))
    return rows


def check_localization_equivalence(target, s_points, n: int, rng) -> list[CheckRow]:
    """Compare the direct observation law against the time-changed diffusion.

    At each ``s`` the direct side is ``s x_* + W_s`` and the diffusion side
    is ``sqrt(s (s+1))`` times a forward sample at ``t(s)``; their means and
    covariances must agree within Monte-Carlo error.  Values of ``s`` too
    small to be informative (both sides collapse to zero) are skipped.
    """
    rng = as_rng(rng)
    n = int(n)
    rows: list[CheckRow] = []
    for s in np.atleast_1d(np.asarray(s_points, dtype=float)):
        if s <= 0:
            raise ValueError("s_points must be positive")
        if s < 1e-12:
            continue
        x_star = target.sample(n, rng)
        direct = s * x_star + np.sqrt(s) * rng.standard_normal((n, target.dim))
        t = time_change(float(s))
        diffusion = np.sqrt(s * (s + 1.0)) * noisy_sample(target, t, n, rng)
        rows.extend(_moment_rows(float(s), direct, diffusion, n))
    return rows


def check_covariance_ode(
    target,
    t_points,
    h: float = None,
    method: str = "auto",
    budget: int = 200_000,
    rng=None,
) -> list[CheckRow]:
    """Check the covariance-decay identity in both time coordinates.

    Diffusion form: ``sigma_t^3 / (2 sigma_dot_t) * d/dt E[tr cov] = E[tr cov^2]``.
    Observation form: ``d/ds E[tr cov_s] = -E[tr cov_s^2]`` at ``s(t)``.

    For Gaussian targets the derivative is taken analytically (quotient rule
    on the closed-form trace), which makes the identity exact to roundoff.
    Quadrature and Monte-Carlo methods use central differences with step
    ``h`` (default ``1e-4 * max(1, t)``); Monte Carlo reuses one substream
    at ``t - h`` and ``t + h`` so the difference is estimated with common
    random numbers.
    """
    rows: list[CheckRow] = []
    if method == "auto":
        if isinstance(target, GaussianTarget):
            method = "closed-form"
        elif target.dim == 1:
            method = "quadrature"
        else:
            method = "monte-carlo"
    for t in np.atleast_1d(np.asarray(t_points, dtype=float)):
        t = float(t)
        h_t = h if h is not None else 1e-4 * max(1.0, t)
        if t - h_t <= 0:
            raise ValueError("finite-difference stencil leaves the positive time axis")
        prefac = sigma(t) ** 3 / (2.0 * sigma_dot(t))
        if method == "closed-form":
            if not isinstance(target, GaussianTarget):
                raise ValueError("closed form is available for Gaussian targets only")
            deriv = _gaussian_trace_derivative(target, t)
            rhs = target.trace_sigma_sq_exact(t)
            lhs = prefac * deriv
            rows.append(CheckRow(t, "cov-decay-t", float(lhs), float(rhs), 0.0, 0.0))
            s = inverse_time_change(t)
            ds_dt = -2.0 * s * (s + 1.0)  # reciprocal slope of the time change
            lhs_s = deriv / ds_dt
            rows.append(CheckRow(s, "cov-decay-s", float(lhs_s), float(-rhs), 0.0, 0.0))
        elif method == "quadrature":
            val = lambda tt: expected_trace_sigma(target, tt, method="quadrature").value
            deriv = (val(t + h_t) - val(t - h_t)) / (2.0 * h_t)
            rhs = expected_trace_sigma_sq(target, t, method="quadrature").value
            rows.append(CheckRow(t, "cov-decay-t", float(prefac * deriv), float(rhs), 0.0, 0.0))
            s = inverse_time_change(t)
            h_s = 1e-4 * max(1.0, s)
            # time_change is decreasing, so t(s + h_s) is the smaller time
            t_up, t_down = time_change(s + h_s), time_change(s - h_s)
            deriv_s = (val(t_up) - val(t_down)) / (2.0 * h_s)
            rows.append(CheckRow(s, "cov-decay-s", float(deriv_s), float(-rhs), 0.0, 0.0))
        elif method == "monte-carlo":
            rng = as_rng(rng if rng is not None else 0)
            seed = int(rng.integers(2**32))
            lo = expected_trace_sigma(target, t - h_t, method="monte-carlo", budget=budget, rng=substream(seed, "crn"))
            hi = expected_trace_sigma(target, t + h_t, method="monte-carlo", budget=budget, rng=substream(seed, "crn"))
            deriv = (hi.value - lo.value) / (2.0 * h_t)
            se_deriv = np.hypot(hi.std_err, lo.std_err) / (2.0 * h_t)  # conservative under CRN
            rhs = expected_trace_sigma_sq(target, t, method="monte-carlo", budget=budget, rng=substream(seed, "sq"))
            lhs = prefac * deriv
            se = float(np.hypot(prefac * se_deriv, rhs.std_err))
            z = float((lhs - rhs.value) / se) if se > 0 else 0.0
            rows.append(CheckRow(t, "cov-decay-t", float(lhs), float(rhs.value), se, z))
        else:
            raise ValueError(f"unknown method {method!r}")
    return rows


def _gaussian_trace_derivative(target: GaussianTarget, t: float) -> float:
    """Analytic d/dt of the expected posterior trace, by the quotient rule.

    Written as an explicitly different arithmetic route than the closed-form
    trace of the squared posterior covariance, so agreement of the two sides
    is a genuine floating-point check of the identity rather than a tautology.
    """
    lam = target._evals
    e2 = np.exp(-2.0 * t)
    s2 = -np.expm1(-2.0 * t)
    denom = e2 * lam + s2
    num_rate = 2.0 * e2  # d(sigma^2)/dt
    denom_rate = 2.0 * e2 * (1.0 - lam)
    deriv = lam * (num_rate * denom - s2 * denom_rate) / denom**2
    return float(np.sum(deriv))


def check_density_martingale(target, s_points, n: int, rng) -> list[CheckRow]:
    """Posterior atom masses average back to the prior weights.

    The relative density of the conditioned law is a martingale in ``s``,
    so for finite-support targets the Monte-Carlo mean of each posterior
    atom mass must equal its prior mass at every ``s``.
    """
    if not (isinstance(target, FiniteMixtureTarget) and target.is_atomic):
        raise ValueError("density-martingale check needs a finite-support target")
    rng = as_rng(rng)
    n = int(n)
    locations, weights = target.atoms()
    rows: list[CheckRow] = []
    for s in np.atleast_1d(np.asarray(s_points, dtype=float)):
        s = float(s)
        if s < 0:
            raise ValueError("s_points must be nonnegative")
        if s == 0.0:
            for j, w in enumerate(weights):
                rows.append(CheckRow(s, f"atom-mass[{j}]", float(w), float(w), 0.0, 0.0))
            continue
        x_star = target.sample(n, rng)
        u = s * x_star + np.sqrt(s) * rng.standard_normal((n, target.dim))
        log_mass = np.log(weights) + u @ locations.T - 0.5 * s * np.sum(locations**2, axis=1)
        mass = np.exp(log_mass - logsumexp(log_mass, axis=1, keepdims=True))
        for j, w in enumerate(weights):
            est = float(mass[:, j].mean())
            se = float(mass[:, j].std(ddof=1) / np.sqrt(n))
            z = float((est - w) / se) if se > 0 else 0.0
            rows.append(CheckRow(s, f"atom-mass[{j}]", est, float(w), se, z))
    return rows


def atom_mass_quadrature(target, s: float, atom_index: int, tol: float = 1e-10) -> float:
    """Deterministic expectation of one posterior atom mass, d = 1 only.

    Integrates the posterior mass of the chosen atom against the exact
    observation marginal (a Gaussian mixture over atoms), providing an
    independent oracle for the martingale property.
    """
    if target.dim != 1 or not target.is_atomic:
        raise ValueError("quadrature oracle needs a one-dimensional atomic target")
    s = float(s)
    if s <= 0:
        raise ValueError("s must be positive")
    locations, weights = target.atoms()
    locs = locations[:, 0]

    centers = s * locs
    std = np.sqrt(s)
    lo = float(centers.min() - 12.0 * std)
    hi = float(centers.max() + 12.0 * std)
    nodes64, weights64 = leggauss(64)
    n_panels = 16
    prev = None
    for _ in range(10):
        edges = np.linspace(lo, hi, n_panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        us = (mid[:, None] + half[:, None] * nodes64).ravel()
        ws = (half[:, None] * weights64).ravel()
        # observation marginal and posterior mass at each node
        log_like = -0.5 * (us[:, None] - centers) ** 2 / s - 0.5 * np.log(2 * np.pi * s)
        log_joint = np.log(weights) + log_like
        log_marg = logsumexp(log_joint, axis=1)
        mass = np.exp(log_joint[:, atom_index] - log_marg)
        val = float(np.sum(ws * np.exp(log_marg) * mass))
        if prev is not None and abs(val - prev) <= tol:
            return val
        prev = val
        n_panels *= 2
    return val
