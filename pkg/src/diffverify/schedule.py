"""Time parametrization of the forward noising process and its reverse chain.

The forward process is the unit-rate mean-reverting diffusion
``dX = -X dt + sqrt(2) dB`` whose marginal noise variance after time ``t``
is ``sigma_sq(t) = 1 - exp(-2t)``.  Reverse-chain discretizations are
``TimeGrid`` objects: reverse times ``t_0 = 0 < ... < t_N = T - delta``
together with the forward-time residuals ``T - t_k``, which are stored as
first-class data so that tiny residuals never suffer cancellation.

``kappa`` is the step-control number of a grid: the smallest constant with
``gamma_k <= kappa * min(1, T - t_{k+1})`` for every step.  The two-phase
construction (linear steps up to ``T - 1``, geometrically shrinking
residuals from 1 down to ``delta``) keeps ``kappa`` of order
``(T + log(1/delta)) / N``; a uniform grid's ``kappa`` degrades like
``1/delta``.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "sigma_sq",
    "sigma",
    "sigma_dot",
    "time_change",
    "inverse_time_change",
    "TimeGrid",
    "make_two_phase_grid",
    "make_uniform_grid",
]

# Relative tolerance used by TimeGrid consistency checks.
_GRID_RTOL = 1e-12


def sigma_sq(t):
    """Noise variance ``1 - exp(-2t)`` of the forward process at time ``t``.

    Evaluated through ``expm1`` so small times do not lose precision to
    cancellation.  Accepts scalars or arrays; ``t`` must be nonnegative.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be nonnegative")
    out = -np.expm1(-2.0 * t)
    return float(out) if out.ndim == 0 else out


def sigma(t):
    """Noise scale ``sqrt(1 - exp(-2t))``."""
    return np.sqrt(sigma_sq(t))


def sigma_dot(t):
    """Time derivative of the noise scale, ``exp(-2t) / sigma(t)``.

    Diverges at ``t = 0``, so strictly positive times are required.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("sigma_dot requires t > 0 (slope diverges at t = 0)")
    out = np.exp(-2.0 * t) / np.sqrt(-np.expm1(-2.0 * t))
    return float(out) if out.ndim == 0 else out


def time_change(s):
    """Map localization time ``s > 0`` to diffusion time ``t = log(1 + 1/s) / 2``."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("localization time must be positive")
    out = 0.5 * np.log1p(1.0 / s)
    return float(out) if out.ndim == 0 else out


def inverse_time_change(t):
    """Map diffusion time ``t > 0`` back to localization time ``s = 1 / (exp(2t) - 1)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("diffusion time must be positive")
    out = 1.0 / np.expm1(2.0 * t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TimeGrid:
    """Reverse-chain discretization ``t_0 = 0 < ... < t_N = T - delta``.

    ``residuals[k]`` holds the forward time ``T - t_k`` explicitly and
    ``kappa`` equals the exact maximum of ``gamma_k / min(1, residuals[k+1])``
    over all steps.  Instances are immutable and safe to share.
    """

    times: np.ndarray
    residuals: np.ndarray
    horizon: float
    early_stop: float
    kappa: float
    scheme: str = "custom"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        residuals = np.asarray(self.residuals, dtype=float)
        times.setflags(write=False)
        residuals.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "residuals", residuals)
        self._validate()

    def _validate(self):
        T, delta = self.horizon, self.early_stop
        t, r = self.times, self.residuals
        if t.ndim != 1 or t.shape != r.shape or t.size < 2:
            raise ValueError("grid needs matching 1-d times/residuals with at least one step")
        if not (0 < delta < T):
            raise ValueError("early stop must lie strictly between 0 and the horizon")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        tol = _GRID_RTOL * max(1.0, T)
        if t[0] != 0.0:
            raise ValueError("grid must start at time 0")
        if abs(t[-1] - (T - delta)) > tol:
            raise ValueError("grid must end at horizon - early_stop")
        if np.max(np.abs(r + t - T)) > tol:
            raise ValueError("residuals inconsistent with times and horizon")
        ratios = self.step_ratios()
        if np.any(ratios > self.kappa) or abs(ratios.max() - self.kappa) > _GRID_RTOL * max(1.0, ratios.max()):
            raise ValueError("stored kappa is not the maximum step ratio")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def gammas(self) -> np.ndarray:
        """Step sizes ``t_{k+1} - t_k``."""
        return np.diff(self.times)

    def step_ratios(self) -> np.ndarray:
        """``gamma_k / min(1, residuals[k+1])`` for every step; max is ``kappa``."""
        return self.gammas / np.minimum(1.0, self.residuals[1:])

    @classmethod
    def from_times(
        cls,
        times,
        horizon: float,
        early_stop: float,
        scheme: str = "custom",
        residuals=None,
    ) -> "TimeGrid":
        """Build a grid from raw times, deriving residuals and kappa."""
        times = np.asarray(times, dtype=float)
        if residuals is None:
            residuals = horizon - times
        residuals = np.asarray(residuals, dtype=float)
        gammas = np.diff(times)
        kappa = float(np.max(gammas / np.minimum(1.0, residuals[1:])))
        return cls(times, residuals, float(horizon), float(early_stop), kappa, scheme)

    def grid_hash(self) -> str:
        """Stable 16-hex-digit fingerprint of the grid contents."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.scheme.encode())
        h.update(np.array([self.horizon, self.early_stop, self.kappa]).tobytes())
        h.update(self.times.tobytes())
        h.update(self.residuals.tobytes())
        return h.hexdigest()

    def write_csv(self, path_or_file) -> None:
        """Serialize as CSV: metadata line, then rows ``k,t_k,residual_k,gamma_k``."""
        if hasattr(path_or_file, "write"):
            self._write_csv(path_or_file)
        else:
            with open(path_or_file, "w", encoding="utf-8", newline="") as f:
                self._write_csv(f)

    def _write_csv(self, f) -> None:
        f.write(
            f"# scheme={self.scheme},T={self.horizon!r},delta={self.early_stop!r},"
            f"kappa={self.kappa!r},n_steps={self.n_steps}\n"
        )
        f.write("k,t_k,residual_k,gamma_k\n")
        gam = self.gammas
        for k in range(self.times.size):
            g = repr(float(gam[k])) if k < gam.size else ""
            f.write(f"{k},{float(self.times[k])!r},{float(self.residuals[k])!r},{g}\n")

    @classmethod
    def read_csv(cls, path_or_file) -> "TimeGrid":
        if hasattr(path_or_file, "read"):
            text = path_or_file.read()
        else:
            with open(path_or_file, "r", encoding="utf-8") as f:
                text = f.read()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split(","))
        times, residuals = [], []
        for ln in lines[2:]:
            _, t_k, r_k, _ = ln.split(",")
            times.append(float(t_k))
            residuals.append(float(r_k))
        return cls(
            np.array(times),
            np.array(residuals),
            horizon=float(meta["T"]),
            early_stop=float(meta["delta"]),
            kappa=float(meta["kappa"]),
            scheme=meta["scheme"],
        )


def make_two_phase_grid(n_steps: int, horizon: float, early_stop: float) -> TimeGrid:
    """Two-phase grid: linear steps on ``[0, T-1]``, geometric residuals ``1 -> delta``.

    The first ``ceil(N/2)`` steps are linearly spaced on ``[0, T-1]``; the
    residuals of the remaining steps decay geometrically from 1 to ``delta``,
    computed directly (never by subtraction from ``T``).  For ``horizon == 1``
    the linear phase is empty and all steps are geometric.
    """
    n_steps = int(n_steps)
    if n_steps < 2:
        raise ValueError("two-phase grid needs at least 2 steps")
    if early_stop >= 1.0 or early_stop <= 0.0:
        raise ValueError("early stop must lie in (0, 1)")
    if horizon < 1.0:
        raise ValueError("horizon below 1 leaves no room for the linear phase")
    if n_steps < math.log(1.0 / early_stop):
        warnings.warn(
            "fewer steps than log(1/early_stop); the grid is valid but kappa*N "
            "is no longer of order T + log(1/early_stop)",
            stacklevel=2,
        )
    n_linear = 0 if horizon == 1.0 else math.ceil(n_steps / 2)
    n_geo = n_steps - n_linear
    lin_times = np.linspace(0.0, horizon - 1.0, n_linear + 1)
    geo_residuals = np.geomspace(1.0, early_stop, n_geo + 1)
    times = np.concatenate([lin_times, horizon - geo_residuals[1:]])
    residuals = np.concatenate([horizon - lin_times, geo_residuals[1:]])
    gammas = np.diff(times)
    kappa = float(np.max(gammas / np.minimum(1.0, residuals[1:])))
    return TimeGrid(times, residuals, float(horizon), float(early_stop), kappa, "two-phase")


def make_uniform_grid(n_steps: int, horizon: float, early_stop: float) -> TimeGrid:
    """Equally spaced baseline grid on ``[0, T - delta]``.

    Its ``kappa`` grows like ``1/delta`` because the final residual alone
    controls the last step, which is what the two-phase grid avoids.
    """
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ValueError("grid needs at least 1 step")
    if not (0.0 < early_stop < horizon):
        raise ValueError("early stop must lie strictly between 0 and the horizon")
    times = np.linspace(0.0, horizon - early_stop, n_steps + 1)
    residuals = horizon - times
    gammas = np.diff(times)
    kappa = float(np.max(gammas / np.minimum(1.0, residuals[1:])))
    return TimeGrid(times, residuals, float(horizon), float(early_stop), kappa, "uniform")
