"""Exact KL accounting for affine chains and path-integral error estimators.

For affine score oracles (Gaussian targets, optionally with constant bias)
the exponential-integrator chain maps Gaussian laws to Gaussian laws, so the
end-time law and hence the KL divergence to the true early-stopped marginal
are exact, with zero Monte-Carlo error.  Everything else is handled through
two certified quantities:

* the path-measure divergence bound: the time integral of the expected
  squared drift mismatch between the true reverse dynamics and the frozen
  approximate drift (an upper bound on the KL divergence between the path
  laws, hence on the end-marginal KL by data processing);
* the pure discretization part of that integral, obtained by plugging in
  the exact score, which the step-control number controls via
  ``kappa^2 d N + kappa d T``.

Both integrals are estimated by streaming exact reverse paths through
per-interval midpoint quadrature nodes, so memory stays at one state batch
regardless of grid size.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .report import CheckRow
from .sampler import ScoreOracle, exact_score_oracle, _ou_transition
from .schedule import TimeGrid, sigma_sq, sigma, sigma_dot
from .streams import as_rng
from .targets import (
    GaussianTarget,
    expectation_1d,
    expected_trace_sigma,
    expected_trace_sigma_sq,
    noisy_sample,
)

__all__ = [
    "GaussianLaw",
    "BoundReport",
    "standard_normal_law",
    "forward_marginal_law",
    "propagate_affine_chain",
    "kl_gaussian",
    "forward_kl",
    "ForwardKL",
    "girsanov_rhs",
    "PathIntegralEstimate",
    "discretization_error",
    "DiscretizationReport",
    "expectation_identities",
    "kl_error_bound",
    "kl_decomposition_check",
    "KLDecomposition",
]


@dataclass(frozen=True)
class GaussianLaw:
    """Mean and covariance of a Gaussian state law."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, float(np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


class ForwardKL(NamedTuple):
    """Exact forward-marginal divergence to the standard Gaussian, and its bound."""

    exact: float
    bound: float
    bound_valid: bool  # the closed-form bound is stated for horizon >= 1


def standard_normal_law(d: int) -> GaussianLaw:
    return GaussianLaw(np.zeros(int(d)), np.eye(int(d)))


def forward_marginal_law(target: GaussianTarget, t: float) -> GaussianLaw:
    """Law of the noisy forward marginal of a Gaussian target at time ``t``."""
    if not isinstance(target, GaussianTarget):
        raise ValueError("closed-form marginals need a Gaussian target")
    decay = np.exp(-float(t))
    cov = decay**2 * target.cov + sigma_sq(t) * np.eye(target.dim)
    return GaussianLaw(decay * target.mean, cov)


def propagate_affine_chain(
    oracle: ScoreOracle, grid: TimeGrid, init: GaussianLaw, max_steps: Optional[int] = None
) -> GaussianLaw:
    """Exact end law of the chain driven by an affine oracle.

    Each step applies the affine map ``y -> e^g y + 2(e^g - 1)(A y + b)``
    plus Gaussian noise of variance ``e^{2g} - 1``, so the state law stays
    Gaussian and is propagated in closed form.  ``max_steps`` truncates the
    chain (0 returns the initial law unchanged).
    """
    if not oracle.is_affine:
        raise ValueError("exact propagation needs an affine oracle")
    d = init.dim
    mean = init.mean.copy()
    cov = init.cov.copy()
    n_steps = grid.n_steps if max_steps is None else min(int(max_steps), grid.n_steps)
    eye = np.eye(d)
    for k in range(n_steps):
        g = float(grid.gammas[k])
        a_mat, b_vec = oracle.affine_form(float(grid.residuals[k]))
        growth = np.expm1(g)
        step_mat = (1.0 + growth) * eye + 2.0 * growth * a_mat
        mean = step_mat @ mean + 2.0 * growth * b_vec
        cov = step_mat @ cov @ step_mat.T + np.expm1(2.0 * g) * eye
        cov = 0.5 * (cov + cov.T)
    return GaussianLaw(mean, cov)


def kl_gaussian(p: GaussianLaw, q: GaussianLaw) -> float:
    """Divergence of ``p`` from ``q`` in nats, exact for Gaussian laws."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    try:
        chol_q = np.linalg.cholesky(q.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("second law must have a positive-definite covariance") from exc
    cond = float(np.linalg.cond(q.cov))
    if cond > 1e8:
        warnings.warn(f"ill-conditioned covariance in divergence (cond ~ {cond:.2e})", stacklevel=2)
    solve = np.linalg.solve
    half = solve(chol_q, p.cov)
    trace_term = float(np.trace(solve(chol_q.T, half)))
    diff = q.mean - p.mean
    y = solve(chol_q, diff)
    quad = float(y @ y)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(chol_q))))
    sign, logdet_p = np.linalg.slogdet(p.cov)
    if sign <= 0:
        raise ValueError("first law must have a positive-definite covariance")
    return 0.5 * (trace_term - d + quad + logdet_q - logdet_p)


def forward_kl(target: GaussianTarget, horizon: float) -> ForwardKL:
    """Exact divergence of the noised target from ``N(0, I)`` plus its bound.

    The bound averages the conditional divergence over the data law:
    ``d log(1/sigma_T^2) - d + d sigma_T^2 + e^{-2T} E|x_0|^2``.  For a
    centered identity-covariance target it reduces to
    ``-d log(1 - e^{-2T})``, which decays like ``d e^{-2T}``.
    """
    horizon = float(horizon)
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    d = target.dim
    law = forward_marginal_law(target, horizon)
    exact = kl_gaussian(law, standard_normal_law(d))
    s2 = sigma_sq(horizon)
    second_moment = float(np.sum(target.mean**2) + np.trace(target.cov))
    bound = d * np.log(1.0 / s2) - d + d * s2 + np.exp(-2.0 * horizon) * second_moment
    return ForwardKL(float(exact), float(bound), horizon >= 1.0)


# -- streaming path integrals ------------------------------------------------


@dataclass(frozen=True)
class PathIntegralEstimate:
    """Monte-Carlo value of a per-path time integral, with quadrature diagnostics."""

    value: float
    std_err: float
    n_paths: int
    quad_points: int
    quad_check_coarse: float
    quad_check_fine: float

    @property
    def quad_check_gap(self) -> float:
        scale = max(1.0, abs(self.quad_check_coarse), abs(self.quad_check_fine))
        return abs(self.quad_check_fine - self.quad_check_coarse) / scale


def _midpoint_offsets(gamma: float, q: int) -> tuple[np.ndarray, float]:
    """Midpoint-rule node offsets measured back from the interval's upper end."""
    return (np.arange(q) + 0.5) * gamma / q, gamma / q


def girsanov_rhs(
    target,
    oracle: ScoreOracle,
    grid: TimeGrid,
    n_paths: int,
    quad_points_per_interval: int = 8,
    rng=None,
    freeze: bool = True,
) -> PathIntegralEstimate:
    """Expected squared drift mismatch integrated along true reverse paths.

    Estimates ``sum_k int_{t_k}^{t_{k+1}} E |score(Y_t, T-t) - approx| ^2 dt``
    where ``approx`` is the oracle frozen at the interval start
    (``freeze=True``, the chain's actual drift) or evaluated continuously
    (``freeze=False``, a diagnostic mode in which an exact oracle gives
    exactly zero).  The result upper-bounds the divergence between the true
    and approximate reverse path laws started from the same horizon law.

    Paths are streamed through the grid one transition at a time: per
    interval the quadrature accumulates ``|score|^2``, the score itself, and
    the weight, and the frozen-drift cross terms are resolved once the
    interval-start state is reached.  The interval attaining the grid's
    step-control ratio (the one with the worst step size relative to its
    forward-time scale, where the integrand varies fastest) is additionally
    integrated with twice the nodes as a resolution check.
    """
    rng = as_rng(rng if rng is not None else 0)
    q = int(quad_points_per_interval)
    if q < 1:
        raise ValueError("need at least one quadrature node per interval")
    n = int(n_paths)
    n_steps = grid.n_steps
    d = target.dim
    check_k = int(np.argmax(grid.step_ratios()))
    totals = np.zeros(n)
    check_coarse = np.zeros(n)
    check_fine = np.zeros(n)

    x = target.sample(n, rng)
    u_prev = 0.0
    for k in range(n_steps - 1, -1, -1):
        gamma = float(grid.gammas[k])
        u_high = float(grid.residuals[k + 1])  # forward time at the interval's upper end
        u_start = float(grid.residuals[k])
        rule_ids = [0, 1] if k == check_k else [0]
        offsets, weights = {}, {}
        for rid in rule_ids:
            offsets[rid], weights[rid] = _midpoint_offsets(gamma, q * (1 + rid))
        # Coarse and doubled midpoint nodes never coincide, so the union is a
        # plain tagged merge, visited in ascending forward time.
        tagged = sorted((float(off), rid) for rid in rule_ids for off in offsets[rid])
        acc = {rid: [np.zeros(n), np.zeros((n, d)), 0.0] for rid in rule_ids}
        for off, rid in tagged:
            u_node = u_high + off
            x = _ou_transition(x, u_node - u_prev, rng)
            u_prev = u_node
            w = weights[rid]
            if freeze:
                sc = target.score(x, u_node)
                acc[rid][0] += w * np.sum(sc * sc, axis=1)
                acc[rid][1] += w * sc
                acc[rid][2] += w
            else:
                diff = target.score(x, u_node) - oracle.evaluate(x, u_node)
                acc[rid][0] += w * np.sum(diff * diff, axis=1)
        # Arrive at the interval start, where the frozen drift is evaluated.
        x = _ou_transition(x, u_start - u_prev, rng)
        u_prev = u_start
        if freeze:
            approx = oracle.evaluate(x, u_start)
            approx_sq = np.sum(approx * approx, axis=1)
            contribs = {}
            for rid in rule_ids:
                sq_sum, dot_sum, w_sum = acc[rid]
                contribs[rid] = sq_sum - 2.0 * np.sum(dot_sum * approx, axis=1) + w_sum * approx_sq
        else:
            contribs = {rid: acc[rid][0] for rid in rule_ids}
        totals += contribs[0]
        if k == check_k:
            check_coarse += contribs[0]
            check_fine += contribs[1]
    value = float(totals.mean())
    std_err = float(totals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return PathIntegralEstimate(
        value,
        std_err,
        n,
        q,
        float(check_coarse.mean()),
        float(check_fine.mean()),
    )


@dataclass(frozen=True)
class DiscretizationReport:
    """Discretization part of the path integral against its step-control bound."""

    estimate: float
    std_err: float
    bound: float
    ratio: float
    n_paths: int
    quad_points: int
    quad_check_gap: float


def discretization_error(
    target, grid: TimeGrid, n_paths: int, quad_points: int = 8, rng=None
) -> DiscretizationReport:
    """Path integral of the frozen-vs-continuous exact-score mismatch.

    This isolates the pure time-discretization error (no score estimation
    error) and reports its ratio to ``kappa^2 d N + kappa d T``.
    """
    est = girsanov_rhs(
        target,
        exact_score_oracle(target),
        grid,
        n_paths,
        quad_points_per_interval=quad_points,
        rng=rng,
        freeze=True,
    )
    d = target.dim
    bound = grid.kappa**2 * d * grid.n_steps + grid.kappa * d * grid.horizon
    return DiscretizationReport(
        est.value,
        est.std_err,
        float(bound),
        est.value / bound,
        est.n_paths,
        est.quad_points,
        est.quad_check_gap,
    )


# -- expectation identities ---------------------------------------------------


def expectation_identities(
    target, t: float, method: str = "auto", budget: int = 100_000, rng=None
) -> list[CheckRow]:
    """Score-norm and Hessian-Frobenius identities at one time.

    Checks ``E|score|^2 = d/s2 - sdot/s^3 * E[tr cov]`` and
    ``E|hess|_F^2 = d/s2^2 - 2 sdot/s^5 E[tr cov] + sdot^2/s^6 E[tr cov^2]``
    with the left sides taken over the noisy marginal directly and the right
    sides assembled from posterior-trace expectations.  Monte Carlo draws two
    independent sample sets, one per side: the Hessian identity is pointwise
    algebraic in the posterior traces, so a common-sample difference would
    degenerate to floating-point noise instead of a statistical comparison.
    """
    t = float(t)
    if method == "auto":
        if isinstance(target, GaussianTarget):
            method = "closed-form"
        elif target.dim == 1:
            method = "quadrature"
        else:
            method = "monte-carlo"
    d = target.dim
    s2 = sigma_sq(t)
    sd = sigma_dot(t)
    sg = sigma(t)
    c1 = sd / sg**3
    c2 = sd / sg**5
    c3 = sd**2 / sg**6
    rows: list[CheckRow] = []
    if method == "closed-form":
        if not isinstance(target, GaussianTarget):
            raise ValueError("closed form is available for Gaussian targets only")
        tr1 = target.trace_sigma_exact(t)
        tr2 = target.trace_sigma_sq_exact(t)
        rows.append(
            CheckRow(t, "score-norm", target.expected_score_norm_exact(t), d / s2 - c1 * tr1, 0.0, 0.0)
        )
        rows.append(
            CheckRow(
                t,
                "hessian-frob",
                target.expected_hessian_frob_exact(t),
                d / s2**2 - 2.0 * c2 * tr1 + c3 * tr2,
                0.0,
                0.0,
            )
        )
    elif method == "quadrature":
        score_sq = lambda x: np.sum(target.score(x, t) ** 2, axis=-1)
        hess_sq = lambda x: np.einsum("...ij,...ij->...", target.score_hessian(x, t), target.score_hessian(x, t))
        lhs1 = expectation_1d(target, t, score_sq)
        lhs2 = expectation_1d(target, t, hess_sq)
        tr1 = expected_trace_sigma(target, t, method="quadrature").value
        tr2 = expected_trace_sigma_sq(target, t, method="quadrature").value
        rows.append(CheckRow(t, "score-norm", lhs1, d / s2 - c1 * tr1, 0.0, 0.0))
        rows.append(CheckRow(t, "hessian-frob", lhs2, d / s2**2 - 2.0 * c2 * tr1 + c3 * tr2, 0.0, 0.0))
    elif method == "monte-carlo":
        rng = as_rng(rng if rng is not None else 0)
        n = int(budget)
        x_lhs = noisy_sample(target, t, n, rng)
        x_rhs = noisy_sample(target, t, n, rng)
        score = target.score(x_lhs, t)
        hess = target.score_hessian(x_lhs, t)
        lhs1 = np.sum(score * score, axis=-1)
        lhs2 = np.einsum("...ij,...ij->...", hess, hess)
        pm = target.posterior_moments(x_rhs, t)
        tr1 = np.trace(pm.cov, axis1=-2, axis2=-1)
        tr2 = np.einsum("...ij,...ji->...", pm.cov, pm.cov)
        rhs1 = d / s2 - c1 * tr1
        rhs2 = d / s2**2 - 2.0 * c2 * tr1 + c3 * tr2
        for name, lhs, rhs in (("score-norm", lhs1, rhs1), ("hessian-frob", lhs2, rhs2)):
            se = float(np.hypot(lhs.std(ddof=1), rhs.std(ddof=1)) / np.sqrt(n))
            z = float((lhs.mean() - rhs.mean()) / se) if se > 0 else 0.0
            rows.append(CheckRow(t, name, float(lhs.mean()), float(rhs.mean()), se, z))
    else:
        raise ValueError(f"unknown method {method!r}")
    return rows


# -- bound arithmetic ----------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    """Additive terms of the end-to-end divergence bound (unit constants)."""

    score_term: float
    disc_quadratic: float
    disc_linear: float
    forward_term: float

    def __post_init__(self):
        for name in ("score_term", "disc_quadratic", "disc_linear", "forward_term"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> float:
        return self.score_term + self.disc_quadratic + self.disc_linear + self.forward_term


def kl_error_bound(eps_sq: float, grid: TimeGrid, d: int) -> BoundReport:
    """Assemble ``eps^2 + kappa^2 d N + kappa d T + d e^{-2T}`` from a grid."""
    eps_sq = float(eps_sq)
    d = int(d)
    if eps_sq < 0 or d < 1:
        raise ValueError("need eps_sq >= 0 and d >= 1")
    kappa, n_steps, horizon = grid.kappa, grid.n_steps, grid.horizon
    return BoundReport(
        score_term=eps_sq,
        disc_quadratic=kappa**2 * d * n_steps,
        disc_linear=kappa * d * horizon,
        forward_term=d * float(np.exp(-2.0 * horizon)),
    )


@dataclass(frozen=True)
class KLDecomposition:
    """Marginal divergences under the two chain initializations."""

    kl_pi_start: float
    kl_qT_start: float
    forward_term: float
    slack: float
    holds: bool


def kl_decomposition_check(target: GaussianTarget, oracle: ScoreOracle, grid: TimeGrid) -> KLDecomposition:
    """Initialization error splits off additively, up to data processing.

    The divergence between the two path laws differs only through the
    starting law, so at the marginal level
    ``KL(start from N(0,I)) <= KL(start from true horizon law) + forward term``.
    All three quantities are exact here (affine oracle required).
    """
    if not oracle.is_affine:
        raise ValueError("exact decomposition check needs an affine oracle")
    q_delta = forward_marginal_law(target, grid.early_stop)
    law_pi = propagate_affine_chain(oracle, grid, standard_normal_law(target.dim))
    law_qt = propagate_affine_chain(oracle, grid, forward_marginal_law(target, grid.horizon))
    kl_pi = kl_gaussian(q_delta, law_pi)
    kl_qt = kl_gaussian(q_delta, law_qt)
    fwd = forward_kl(target, grid.horizon).exact
    slack = kl_qt + fwd - kl_pi
    return KLDecomposition(kl_pi, kl_qt, fwd, float(slack), bool(slack >= -1e-9 * max(1.0, kl_pi)))
