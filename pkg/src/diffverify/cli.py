"""Configuration-driven experiment harness.

Subcommands select a verification suite; a key-value config file describes
the target, grid, perturbation, and budgets.  Each run writes deterministic
CSV artifacts (plus rendered figures) into the output directory together
with a JSON run record echoing the config.  Exit codes: 0 on success, 2 on
configuration errors (nothing is written), 3 when a numerical suite ran but
failed its gates (artifacts are kept as evidence).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    discretization_error,
    expectation_identities,
    forward_kl,
    forward_marginal_law,
    girsanov_rhs,
    kl_decomposition_check,
    kl_error_bound,
    kl_gaussian,
    propagate_affine_chain,
    standard_normal_law,
)
from .config import ConfigError, ExperimentConfig, build_grid, build_target, parse_config
from .localization import (
    check_covariance_ode,
    check_density_martingale,
    check_localization_equivalence,
)
from .report import (
    CheckRow,
    ResultRow,
    check_rows_to_dicts,
    render_check_figure,
    render_grid_figure,
    render_result_figure,
    render_sweep_figure,
    result_rows_to_dicts,
    write_csv,
)
from .sampler import (
    dump_samples_csv,
    dump_samples_raw,
    exact_score_oracle,
    measured_assumption_budget,
    perturb_oracle,
    run_sampler,
)
from .streams import mix_seed, substream
from .targets import FiniteMixtureTarget, GaussianTarget

# Gates applied to check rows, by how the row was computed.
_EXACT_RTOL = 1e-10
_QUAD_RTOL = 1e-4
_Z_GATE = 4.0


class SuiteFailure(Exception):
    """A verification suite ran to completion but a gate did not hold."""


def _check_row_ok(row: CheckRow, deterministic_rtol: float) -> bool:
    scale = max(1.0, abs(row.rhs))
    if row.std_err <= 1e-12 * scale:
        # Deterministic row, or a Monte-Carlo estimator whose spread collapsed
        # below floating-point resolution; the z-score is meaningless there.
        return abs(row.lhs - row.rhs) <= deterministic_rtol * scale
    return abs(row.z_score) <= _Z_GATE


def _build_oracle(cfg: ExperimentConfig, target, grid):
    oracle = exact_score_oracle(target)
    if cfg.perturbation is not None and cfg.perturbation.epsilon > 0:
        oracle = perturb_oracle(oracle, cfg.perturbation, grid)
    return oracle


def _suite_identities(cfg: ExperimentConfig):
    target = build_target(cfg.target)
    t_min, t_max, n_pts = cfg.identity_t_grid
    rows: list[CheckRow] = []
    for i, t in enumerate(np.geomspace(t_min, t_max, int(n_pts))):
        rows.extend(
            expectation_identities(
                target, float(t), budget=cfg.n_paths, rng=substream(cfg.seed, "identities", i)
            )
        )
    tol = _EXACT_RTOL if isinstance(target, GaussianTarget) else 1e-6
    ok = all(_check_row_ok(r, tol) for r in rows)
    return rows, ok


def _suite_localization(cfg: ExperimentConfig):
    target = build_target(cfg.target)
    rows: list[CheckRow] = []
    rows_eq = check_localization_equivalence(
        target, cfg.s_points, cfg.n_paths, substream(cfg.seed, "sl-equivalence")
    )
    rows_ode = check_covariance_ode(
        target, cfg.t_points, budget=cfg.n_paths, rng=substream(cfg.seed, "sl-ode")
    )
    rows = rows_eq + rows_ode
    ok = all(_check_row_ok(r, _EXACT_RTOL) for r in rows_eq)
    ode_tol = _EXACT_RTOL if isinstance(target, GaussianTarget) else _QUAD_RTOL
    ok = ok and all(_check_row_ok(r, ode_tol) for r in rows_ode)
    if isinstance(target, FiniteMixtureTarget) and target.is_atomic:
        rows_mart = check_density_martingale(
            target, cfg.s_points, cfg.n_paths, substream(cfg.seed, "sl-martingale")
        )
        rows += rows_mart
        ok = ok and all(_check_row_ok(r, _EXACT_RTOL) for r in rows_mart)
    return rows, ok


def _suite_kl_exact(cfg: ExperimentConfig):
    target = build_target(cfg.target)
    if not isinstance(target, GaussianTarget):
        raise ConfigError("config key 'target.family': kl-exact needs a gaussian or point-mass target")
    grid = build_grid(cfg.grid)
    oracle = _build_oracle(cfg, target, grid)
    q_delta = forward_marginal_law(target, grid.early_stop)
    law_pi = propagate_affine_chain(oracle, grid, standard_normal_law(target.dim))
    law_qt = propagate_affine_chain(oracle, grid, forward_marginal_law(target, grid.horizon))
    kl_pi = kl_gaussian(q_delta, law_pi)
    kl_qt = kl_gaussian(q_delta, law_qt)
    fwd = forward_kl(target, grid.horizon)
    eps_sq = cfg.perturbation.epsilon**2 if cfg.perturbation else 0.0
    bound = kl_error_bound(eps_sq, grid, target.dim)
    decomp = kl_decomposition_check(target, oracle, grid)
    rows = [
        ResultRow("kl-exact[init=standard-gaussian]", kl_pi, 0.0, bound.total,
                  kl_pi / bound.total if bound.total else None, cfg.n_paths, cfg.seed),
        ResultRow("kl-exact[init=exact-q_T]", kl_qt, 0.0, None, None, cfg.n_paths, cfg.seed),
        ResultRow("forward-kl", fwd.exact, 0.0, fwd.bound,
                  fwd.exact / fwd.bound if fwd.bound else None, cfg.n_paths, cfg.seed),
        ResultRow("bound-term[score]", bound.score_term, seed=cfg.seed),
        ResultRow("bound-term[disc-quadratic]", bound.disc_quadratic, seed=cfg.seed),
        ResultRow("bound-term[disc-linear]", bound.disc_linear, seed=cfg.seed),
        ResultRow("bound-term[forward]", bound.forward_term, seed=cfg.seed),
        ResultRow("kl-decomposition-slack", decomp.slack, seed=cfg.seed),
    ]
    ok = decomp.holds and fwd.exact <= fwd.bound + 1e-12
    return rows, ok, grid


def _suite_girsanov(cfg: ExperimentConfig):
    target = build_target(cfg.target)
    grid = build_grid(cfg.grid)
    oracle = _build_oracle(cfg, target, grid)
    rhs = girsanov_rhs(
        target, oracle, grid, cfg.n_paths, cfg.quad_points, substream(cfg.seed, "girsanov")
    )
    disc = discretization_error(
        target, grid, cfg.n_paths, cfg.quad_points, substream(cfg.seed, "discretization")
    )
    rows = [
        ResultRow("girsanov-rhs", rhs.value, rhs.std_err, None, None, cfg.n_paths, cfg.seed),
        ResultRow("girsanov-quad-gap", rhs.quad_check_gap, seed=cfg.seed),
        ResultRow("discretization-error", disc.estimate, disc.std_err, disc.bound, disc.ratio,
                  cfg.n_paths, cfg.seed),
    ]
    ok = rhs.quad_check_gap <= 0.2
    if oracle.is_affine:
        q_delta = forward_marginal_law(target, grid.early_stop)
        law_qt = propagate_affine_chain(oracle, grid, forward_marginal_law(target, grid.horizon))
        kl_qt = kl_gaussian(q_delta, law_qt)
        girsanov_cap = rhs.value + 3.0 * rhs.std_err
        rows.append(
            ResultRow("kl-exact[init=exact-q_T]", kl_qt, 0.0, girsanov_cap,
                      kl_qt / girsanov_cap if girsanov_cap else None, cfg.n_paths, cfg.seed)
        )
        ok = ok and kl_qt <= girsanov_cap
    if cfg.perturbation is not None and cfg.perturbation.epsilon > 0:
        budget = measured_assumption_budget(
            target, oracle, grid, cfg.n_paths, substream(cfg.seed, "budget")
        )
        eps_sq = cfg.perturbation.epsilon**2
        rows.append(
            ResultRow("assumption-budget", budget.value, budget.std_err, eps_sq,
                      budget.value / eps_sq, cfg.n_paths, cfg.seed)
        )
        # Constant bias realizes the budget exactly; per-step draws realize it
        # only in expectation, with a chi-square spread around eps^2.
        tol = 3.0 * budget.std_err + 1e-9 * eps_sq
        if cfg.perturbation.mode == "per-step-independent-bias":
            gam = grid.gammas
            total = float(grid.times[-1] - grid.times[0])
            draw_sd = eps_sq * float(np.sqrt(2.0 * np.sum(gam**2) / (target.dim * total**2)))
            tol += 3.0 * draw_sd
        ok = ok and abs(budget.value - eps_sq) <= tol
    return rows, ok, grid


def _sweep_point_config(cfg: ExperimentConfig, axis: str, value):
    if axis == "N":
        return replace(cfg, grid=replace(cfg.grid, n_steps=int(value)))
    if axis == "delta":
        return replace(cfg, grid=replace(cfg.grid, early_stop=float(value)))
    if axis == "epsilon":
        return replace(cfg, perturbation=replace(cfg.perturbation, epsilon=float(value)))
    # dimension sweep: replicate an isotropic scalar target across coordinates
    tspec = cfg.target
    if tspec.family == "mixture":
        raise ConfigError("config key 'sweep.axis': dimension sweeps support gaussian/point-mass only")
    d = int(value)
    mean = tspec.mean
    if mean is not None and isinstance(mean, list) and len(mean) not in (1, d):
        raise ConfigError("config key 'sweep.axis': dimension sweep needs a scalar or 1-d base mean")
    if isinstance(mean, list) and len(mean) == 1:
        mean = mean * d
    elif isinstance(mean, (int, float)):
        mean = [mean] * d
    cov = tspec.covariance
    if isinstance(cov, list):
        raise ConfigError("config key 'sweep.axis': dimension sweep needs identity or scalar covariance")
    return replace(cfg, target=replace(tspec, dimension=d, mean=mean, covariance=cov))


def _suite_sweep(cfg: ExperimentConfig):
    rows: list[dict] = []
    ok = True
    grid_for_figure = None
    for value in cfg.sweep.values:
        # Stable per-point seed: independent noise per axis value, identical
        # across reruns of the same master seed.
        point_seed = mix_seed(cfg.seed, cfg.sweep.axis, repr(value)) % 2**31
        point_cfg = _sweep_point_config(cfg, cfg.sweep.axis, value)
        point_cfg = replace(point_cfg, seed=point_seed)
        if cfg.sweep.suite == "kl-exact":
            point_rows, point_ok, grid = _suite_kl_exact(point_cfg)
        else:
            point_rows, point_ok, grid = _suite_girsanov(point_cfg)
        grid_for_figure = grid
        ok = ok and point_ok
        for r in point_rows:
            rows.append(
                {
                    "axis": cfg.sweep.axis,
                    "axis_value": value,
                    "quantity": r.quantity,
                    "value": r.value,
                    "std_err": r.std_err,
                    "bound": r.bound,
                    "ratio": r.ratio,
                    "n_paths": r.n_paths,
                    "seed": point_seed,
                }
            )
    return rows, ok, grid_for_figure


def _meta(cfg: ExperimentConfig, command: str, grid=None) -> dict:
    meta = {"command": command, "seed": cfg.seed, "n_paths": cfg.n_paths, "version": __version__}
    if grid is not None:
        meta["grid_hash"] = grid.grid_hash()
    return meta


def run_experiment(cfg: ExperimentConfig, command: str, outdir: Path, figures: bool = True,
                   dump_samples: str = None, dump_format: str = "csv") -> tuple[bool, dict]:
    """Execute one suite, writing artifacts into ``outdir``.

    Returns (suite passed, run record).  On an unexpected error all files
    created so far are removed before the exception propagates.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    t_start = time.perf_counter()

    def _path(name: str) -> Path:
        p = outdir / name
        created.append(p)
        return p

    try:
        grid = None
        if command == "verify-identities":
            rows, ok = _suite_identities(cfg)
            fields, dicts = check_rows_to_dicts(rows, coord_name="t")
            write_csv(_path("identities.csv"), fields, dicts, _meta(cfg, command))
            if figures:
                render_check_figure(rows, _path("identities.png"), "expectation identities")
        elif command == "verify-localization":
            rows, ok = _suite_localization(cfg)
            fields, dicts = check_rows_to_dicts(rows)
            write_csv(_path("localization.csv"), fields, dicts, _meta(cfg, command))
            if figures:
                render_check_figure(rows, _path("localization.png"), "localization checks")
        elif command == "kl-exact":
            rows, ok, grid = _suite_kl_exact(cfg)
            fields, dicts = result_rows_to_dicts(rows)
            write_csv(_path("results.csv"), fields, dicts, _meta(cfg, command, grid))
            grid.write_csv(_path("grid.csv"))
            eps_sq = cfg.perturbation.epsilon**2 if cfg.perturbation else 0.0
            bound = kl_error_bound(eps_sq, grid, build_target(cfg.target).dim)
            write_csv(
                _path("bound_report.csv"),
                ["score_term", "disc_quadratic", "disc_linear", "forward_term", "total"],
                [{
                    "score_term": bound.score_term,
                    "disc_quadratic": bound.disc_quadratic,
                    "disc_linear": bound.disc_linear,
                    "forward_term": bound.forward_term,
                    "total": bound.total,
                }],
                _meta(cfg, command, grid),
            )
            if figures:
                render_result_figure(rows, _path("results.png"), "exact divergence accounting")
                render_grid_figure(grid, _path("grid.png"))
        elif command == "girsanov":
            rows, ok, grid = _suite_girsanov(cfg)
            fields, dicts = result_rows_to_dicts(rows)
            write_csv(_path("results.csv"), fields, dicts, _meta(cfg, command, grid))
            grid.write_csv(_path("grid.csv"))
            if figures:
                render_result_figure(rows, _path("results.png"), "path-integral bounds")
                render_grid_figure(grid, _path("grid.png"))
        elif command == "sweep":
            dicts, ok, grid = _suite_sweep(cfg)
            fields = ["axis", "axis_value", "quantity", "value", "std_err", "bound", "ratio",
                      "n_paths", "seed"]
            write_csv(_path("sweep.csv"), fields, dicts, _meta(cfg, command))
            if figures and dicts:
                series: dict[str, list] = {}
                values = list(dict.fromkeys(d["axis_value"] for d in dicts))
                for q in sorted({d["quantity"] for d in dicts}):
                    series[q] = [
                        next((d["value"] for d in dicts if d["quantity"] == q and d["axis_value"] == v), None)
                        for v in values
                    ]
                series = {q: ys for q, ys in series.items() if all(y is not None for y in ys)}
                render_sweep_figure(cfg.sweep.axis, values, series,
                                    _path("sweep.png"), f"sweep over {cfg.sweep.axis}")
        else:
            raise ConfigError(f"unknown command {command!r}")

        if dump_samples:
            target = build_target(cfg.target)
            dump_grid = grid if grid is not None else build_grid(cfg.grid)
            oracle = _build_oracle(cfg, target, dump_grid)
            samples = run_sampler(oracle, dump_grid, "standard-gaussian", cfg.n_paths,
                                  substream(cfg.seed, "dump"))
            dump_path = outdir / dump_samples
            created.append(dump_path)
            if dump_format == "raw":
                dump_samples_raw(dump_path, samples, cfg.seed, dump_grid)
            else:
                dump_samples_csv(dump_path, samples, cfg.seed, dump_grid)

        record = {
            "command": command,
            "version": __version__,
            "seed": cfg.seed,
            "n_paths": cfg.n_paths,
            "passed": bool(ok),
            "grid_hash": grid.grid_hash() if grid is not None else None,
            "wall_time_s": round(time.perf_counter() - t_start, 3),
            "artifacts": [p.name for p in created],
            "config_echo": cfg.source_text,
        }
        with open(outdir / "run_record.json", "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
            f.write("\n")
        return bool(ok), record
    except ConfigError:
        for p in created:
            p.unlink(missing_ok=True)
        raise
    except Exception as exc:
        for p in created:
            p.unlink(missing_ok=True)
        raise RuntimeError(f"suite '{command}' failed mid-run: {exc}") from exc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffverify",
        description="Numerical verification harness for exact-score diffusion sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (
        ("verify-identities", "score-norm and Hessian-Frobenius expectation identities"),
        ("verify-localization", "observation-process equivalence, covariance decay, atom-mass martingale"),
        ("kl-exact", "exact divergence accounting for affine chains"),
        ("girsanov", "path-integral divergence bounds and discretization error"),
        ("sweep", "repeat a suite across axis values"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help="path to the key-value config file")
        p.add_argument("--out", required=True, help="output directory for CSV/PNG artifacts")
        p.add_argument("--seed-override", type=int, default=None, help="replace the config seed")
        p.add_argument("--figures", default=True, action=argparse.BooleanOptionalAction,
                       help="render PNG figures next to the CSVs")
        p.add_argument("--dump-samples", metavar="FILE", default=None,
                       help="also run the sampler and dump end-time samples to FILE in --out")
        p.add_argument("--dump-format", choices=("csv", "raw"), default="csv")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text)
        if cfg.command and cfg.command != args.command:
            raise ConfigError(
                f"config key 'command': file says {cfg.command!r} but subcommand is {args.command!r}"
            )
        if args.seed_override is not None:
            cfg = replace(cfg, seed=args.seed_override)
        ok, record = run_experiment(
            cfg, args.command, Path(args.out), figures=args.figures,
            dump_samples=args.dump_samples, dump_format=args.dump_format,
        )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    status = "pass" if ok else "FAIL"
    print(f"{args.command}: {status} (artifacts in {args.out})")
    return 0 if ok else 3


if __name__ == "__main__":
    sys.exit(main())
