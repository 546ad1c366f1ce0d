"""Experiment configuration: a hand-parsed key-value (TOML-subset) format.

A config document is lines of ``key = value`` grouped under ``[section]``
headers, with ``#`` comments.  Values are integers, floats, booleans,
quoted strings, bare words, or (nested) single-line arrays.  The parser
keeps the source line of every key so validation errors can name both the
offending key and where it was written.

Example::

    command = "kl-exact"
    seed = 7
    n_paths = 4000

    [target]
    family = "gaussian"
    dimension = 2
    mean = [0.0, 0.0]
    covariance = "identity"

    [grid]
    scheme = "two-phase"
    n_steps = 64
    horizon = 5.0
    early_stop = 0.01
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sampler import PerturbationSpec
from .schedule import TimeGrid, make_two_phase_grid, make_uniform_grid
from .targets import FiniteMixtureTarget, GaussianTarget

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TargetSpec",
    "GridSpec",
    "SweepSpec",
    "parse_config",
    "build_target",
    "build_grid",
]

COMMANDS = ("verify-identities", "verify-localization", "kl-exact", "girsanov", "sweep")
SWEEP_AXES = ("d", "N", "delta", "epsilon")

_KNOWN_KEYS = {
    "command",
    "seed",
    "n_paths",
    "quad_points",
    "target.family",
    "target.dimension",
    "target.mean",
    "target.covariance",
    "target.weights",
    "target.means",
    "target.covariances",
    "grid.scheme",
    "grid.n_steps",
    "grid.horizon",
    "grid.early_stop",
    "perturbation.mode",
    "perturbation.epsilon",
    "perturbation.seed",
    "sweep.axis",
    "sweep.values",
    "sweep.suite",
    "identities.t_min",
    "identities.t_max",
    "identities.points",
    "localization.s_points",
    "localization.t_points",
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and source line."""


def _fail(key: str, line: Optional[int], why: str):
    where = f" (line {line})" if line is not None else ""
    raise ConfigError(f"config key '{key}'{where}: {why}")


def _parse_scalar(token: str, key: str, line: int):
    token = token.strip()
    if not token:
        _fail(key, line, "empty value")
    if token.lower() in ("true", "false"):
        return token.lower() == "true"
    if (token[0] == token[-1] == '"') or (token[0] == token[-1] == "'"):
        return token[1:-1]
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    if token.replace("-", "").replace("_", "").isalnum():
        return token  # bare word, kept as a string
    _fail(key, line, f"cannot parse value {token!r}")


def _split_top_level(body: str) -> list[str]:
    parts, depth, current = [], 0, []
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    if current:
        parts.append("".join(current))
    return parts


def _parse_value(token: str, key: str, line: int):
    token = token.strip()
    if token.startswith("["):
        if not token.endswith("]"):
            _fail(key, line, "unterminated array")
        body = token[1:-1].strip()
        if not body:
            return []
        return [_parse_value(p, key, line) for p in _split_top_level(body)]
    return _parse_scalar(token, key, line)


def parse_kv_document(text: str) -> dict[str, tuple[object, int]]:
    """Parse the raw document into ``{dotted key: (value, line number)}``."""
    out: dict[str, tuple[object, int]] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"empty section header (line {lineno})")
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' (line {lineno}): {raw!r}")
        key, _, body = line.partition("=")
        key = key.strip()
        body = body.split("#", 1)[0].strip() if not body.strip().startswith(('"', "'")) else body.strip()
        full_key = f"{section}.{key}" if section else key
        if full_key in out:
            _fail(full_key, lineno, "duplicate key")
        out[full_key] = (_parse_value(body, full_key, lineno), lineno)
    return out


@dataclass(frozen=True)
class TargetSpec:
    family: str
    dimension: int
    mean: Optional[list] = None
    covariance: Optional[object] = None
    weights: Optional[list] = None
    means: Optional[list] = None
    covariances: Optional[list] = None


@dataclass(frozen=True)
class GridSpec:
    scheme: str
    n_steps: int
    horizon: float
    early_stop: float


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: list
    suite: str


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    seed: int
    n_paths: int
    target: TargetSpec
    grid: GridSpec
    perturbation: Optional[PerturbationSpec] = None
    sweep: Optional[SweepSpec] = None
    quad_points: int = 8
    identity_t_grid: tuple = (1e-3, 5.0, 20)
    s_points: tuple = (0.5, 1.0, 4.0)
    t_points: tuple = (0.25, 0.5, 1.0)
    source_text: str = ""


def _take(doc, key, default=None, required=False, kind=None):
    if key not in doc:
        if required:
            raise ConfigError(f"config key '{key}': missing (required)")
        return default, None
    value, line = doc.pop(key)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(key, line, f"expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(key, line, f"expected a number, got {value!r}")
        value = float(value)
    elif kind is str and not isinstance(value, str):
        _fail(key, line, f"expected a string, got {value!r}")
    elif kind is list and not isinstance(value, list):
        _fail(key, line, f"expected an array, got {value!r}")
    return value, line


def _coerce_cov(raw, d: int, key: str, line):
    if raw is None or raw == "identity":
        return np.eye(d)
    if isinstance(raw, (int, float)):
        return float(raw) * np.eye(d)
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 1:
        if arr.size != d:
            _fail(key, line, f"diagonal has {arr.size} entries for dimension {d}")
        return np.diag(arr)
    if arr.shape != (d, d):
        _fail(key, line, f"matrix shape {arr.shape} does not match dimension {d}")
    return arr


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config document; raise ConfigError with location."""
    doc = parse_kv_document(text)

    command, cmd_line = _take(doc, "command", kind=str)
    if command is not None and command not in COMMANDS:
        _fail("command", cmd_line, f"must be one of {COMMANDS}")
    seed, _ = _take(doc, "seed", required=True, kind=int)
    n_paths, _ = _take(doc, "n_paths", default=10_000, kind=int)
    quad_points, _ = _take(doc, "quad_points", default=8, kind=int)

    family, fam_line = _take(doc, "target.family", required=True, kind=str)
    dimension, dim_line = _take(doc, "target.dimension", required=True, kind=int)
    if dimension < 1:
        _fail("target.dimension", dim_line, "must be at least 1")
    mean, _ = _take(doc, "target.mean")
    covariance, cov_line = _take(doc, "target.covariance")
    weights, w_line = _take(doc, "target.weights")
    means, m_line = _take(doc, "target.means")
    covariances, cs_line = _take(doc, "target.covariances")
    if family not in ("gaussian", "point-mass", "mixture"):
        _fail("target.family", fam_line, "must be gaussian, point-mass, or mixture")
    if family == "mixture":
        if weights is None or means is None:
            _fail("target.family", fam_line, "mixture needs target.weights and target.means")
        for j, m in enumerate(means):
            mm = m if isinstance(m, list) else [m]
            if len(mm) != dimension:
                _fail("target.means", m_line, f"component {j} has dimension {len(mm)}, expected {dimension}")
        if covariances is not None and len(covariances) != len(weights):
            _fail("target.covariances", cs_line, "need one covariance per component")
    else:
        if mean is not None:
            mm = mean if isinstance(mean, list) else [mean]
            if len(mm) != dimension:
                _fail("target.mean", dim_line, f"mean has dimension {len(mm)}, expected {dimension}")
    target = TargetSpec(family, dimension, mean, covariance, weights, means, covariances)
    # Covariance shapes are validated eagerly so errors carry source lines.
    build_target(target, _cov_line=cov_line, _covs_line=cs_line)

    scheme, scheme_line = _take(doc, "grid.scheme", default="two-phase", kind=str)
    if scheme not in ("two-phase", "uniform"):
        _fail("grid.scheme", scheme_line, "must be two-phase or uniform")
    n_steps, _ = _take(doc, "grid.n_steps", required=True, kind=int)
    horizon, _ = _take(doc, "grid.horizon", required=True, kind=float)
    early_stop, _ = _take(doc, "grid.early_stop", required=True, kind=float)
    grid = GridSpec(scheme, n_steps, horizon, early_stop)

    perturbation = None
    if any(k.startswith("perturbation.") for k in doc):
        mode, mode_line = _take(doc, "perturbation.mode", required=True, kind=str)
        epsilon, _ = _take(doc, "perturbation.epsilon", required=True, kind=float)
        pseed, _ = _take(doc, "perturbation.seed", default=seed, kind=int)
        try:
            perturbation = PerturbationSpec(mode, epsilon, pseed)
        except ValueError as exc:
            _fail("perturbation.mode", mode_line, str(exc))

    sweep = None
    if command == "sweep" or any(k.startswith("sweep.") for k in doc):
        axis, axis_line = _take(doc, "sweep.axis", required=True, kind=str)
        if axis not in SWEEP_AXES:
            _fail("sweep.axis", axis_line, f"must be one of {SWEEP_AXES}")
        values, values_line = _take(doc, "sweep.values", required=True, kind=list)
        if not values:
            _fail("sweep.values", values_line, "must be a nonempty array")
        suite, suite_line = _take(doc, "sweep.suite", default="girsanov", kind=str)
        if suite not in ("kl-exact", "girsanov"):
            _fail("sweep.suite", suite_line, "must be kl-exact or girsanov")
        if axis == "epsilon" and perturbation is None:
            _fail("sweep.axis", axis_line, "epsilon sweep needs a [perturbation] section")
        sweep = SweepSpec(axis, values, suite)

    t_min, _ = _take(doc, "identities.t_min", default=1e-3, kind=float)
    t_max, _ = _take(doc, "identities.t_max", default=5.0, kind=float)
    t_pts, _ = _take(doc, "identities.points", default=20, kind=int)
    s_points, _ = _take(doc, "localization.s_points", default=[0.5, 1.0, 4.0], kind=list)
    t_points, _ = _take(doc, "localization.t_points", default=[0.25, 0.5, 1.0], kind=list)

    if doc:
        key = sorted(doc, key=lambda k: doc[k][1])[0]
        _fail(key, doc[key][1], "unknown key")

    return ExperimentConfig(
        command=command or "",
        seed=seed,
        n_paths=n_paths,
        target=target,
        grid=grid,
        perturbation=perturbation,
        sweep=sweep,
        quad_points=quad_points,
        identity_t_grid=(t_min, t_max, t_pts),
        s_points=tuple(float(s) for s in s_points),
        t_points=tuple(float(t) for t in t_points),
        source_text=text,
    )


def build_target(spec: TargetSpec, _cov_line=None, _covs_line=None):
    """Materialize the target object described by a TargetSpec."""
    d = spec.dimension
    if spec.family == "gaussian":
        mean = np.zeros(d) if spec.mean is None else np.atleast_1d(np.asarray(spec.mean, dtype=float))
        return GaussianTarget(mean, _coerce_cov(spec.covariance, d, "target.covariance", _cov_line))
    if spec.family == "point-mass":
        mean = np.zeros(d) if spec.mean is None else np.atleast_1d(np.asarray(spec.mean, dtype=float))
        return GaussianTarget(mean, np.zeros((d, d)))
    comps = []
    for j, m in enumerate(spec.means):
        cov_j = (
            np.zeros((d, d))
            if spec.covariances is None
            else _coerce_cov(spec.covariances[j], d, "target.covariances", _covs_line)
        )
        comps.append(GaussianTarget(np.atleast_1d(np.asarray(m, dtype=float)), cov_j))
    try:
        return FiniteMixtureTarget(np.asarray(spec.weights, dtype=float), comps)
    except ValueError as exc:
        raise ConfigError(f"config key 'target.weights': {exc}") from exc


def build_grid(spec: GridSpec) -> TimeGrid:
    maker = make_two_phase_grid if spec.scheme == "two-phase" else make_uniform_grid
    try:
        return maker(spec.n_steps, spec.horizon, spec.early_stop)
    except ValueError as exc:
        raise ConfigError(f"config section '[grid]': {exc}") from exc
