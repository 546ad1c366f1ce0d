"""Result rows, deterministic CSV artifacts, and figure rendering.

Two long-format row shapes cover every suite:

* ``CheckRow``     -- (coord, quantity, lhs, rhs, std_err, z_score): paired
  comparisons indexed by a time-like coordinate.
* ``ResultRow``    -- (quantity, value, std_err, bound, ratio, n_paths, seed):
  estimates against reference bounds.

CSV files start with a ``#``-prefixed metadata line; floats are written with
``repr`` (shortest exact round trip) so reruns with the same seed produce
byte-identical artifacts.  Figures are rendered to PNG next to the CSVs with
the Agg backend; matplotlib is imported lazily so the numeric modules stay
lightweight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

__all__ = [
    "CheckRow",
    "ResultRow",
    "format_cell",
    "write_csv",
    "render_check_figure",
    "render_result_figure",
    "render_grid_figure",
    "render_sweep_figure",
]


@dataclass(frozen=True)
class CheckRow:
    """One paired comparison at a coordinate (a time or localization scale)."""

    coord: float
    quantity: str
    lhs: float
    rhs: float
    std_err: float
    z_score: float


@dataclass(frozen=True)
class ResultRow:
    """One measured quantity with an optional reference bound."""

    quantity: str
    value: float
    std_err: float = 0.0
    bound: Optional[float] = None
    ratio: Optional[float] = None
    n_paths: Optional[int] = None
    seed: Optional[int] = None


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path, fieldnames: list[str], rows: Iterable[dict], meta: dict = None) -> None:
    """Write long-format rows with an optional leading metadata comment."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        if meta:
            f.write("# " + ",".join(f"{k}={format_cell(v)}" for k, v in meta.items()) + "\n")
        f.write(",".join(fieldnames) + "\n")
        for row in rows:
            f.write(",".join(format_cell(row.get(name)) for name in fieldnames) + "\n")


def check_rows_to_dicts(rows: Iterable[CheckRow], coord_name: str = "s_or_t") -> tuple[list[str], list[dict]]:
    fields = [coord_name, "quantity", "lhs", "rhs", "std_err", "z_score"]
    dicts = [
        {
            coord_name: r.coord,
            "quantity": r.quantity,
            "lhs": r.lhs,
            "rhs": r.rhs,
            "std_err": r.std_err,
            "z_score": r.z_score,
        }
        for r in rows
    ]
    return fields, dicts


def result_rows_to_dicts(rows: Iterable[ResultRow]) -> tuple[list[str], list[dict]]:
    fields = ["quantity", "value", "std_err", "bound", "ratio", "n_paths", "seed"]
    return fields, [
        {
            "quantity": r.quantity,
            "value": r.value,
            "std_err": r.std_err,
            "bound": r.bound,
            "ratio": r.ratio,
            "n_paths": r.n_paths,
            "seed": r.seed,
        }
        for r in rows
    ]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_check_figure(rows: list[CheckRow], path, title: str) -> None:
    """Two panels: lhs/rhs values over the coordinate, and z-scores."""
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    quantities = sorted({r.quantity for r in rows})
    for q in quantities:
        qr = [r for r in rows if r.quantity == q]
        xs = [r.coord for r in qr]
        ax0.plot(xs, [r.lhs for r in qr], "o-", ms=3, label=f"{q} lhs")
        ax0.plot(xs, [r.rhs for r in qr], "x--", ms=4, label=f"{q} rhs")
        ax1.plot(xs, [r.z_score for r in qr], "o-", ms=3, label=q)
    ax0.set_xlabel("s or t")
    ax0.set_ylabel("value")
    if len(quantities) <= 6:
        ax0.legend(fontsize=6)
    ax1.axhline(3.0, color="r", lw=0.8, ls=":")
    ax1.axhline(-3.0, color="r", lw=0.8, ls=":")
    ax1.set_xlabel("s or t")
    ax1.set_ylabel("z score")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_result_figure(rows: list[ResultRow], path, title: str) -> None:
    """Horizontal bars of values against their bounds where present."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 0.55 * max(4, len(rows))))
    names = [r.quantity for r in rows]
    ys = np.arange(len(rows))
    vals = [r.value for r in rows]
    ax.barh(ys, vals, height=0.5, label="value")
    for y, r in zip(ys, rows):
        if r.bound is not None:
            ax.plot([r.bound], [y], "r|", ms=14)
        if r.std_err:
            ax.errorbar([r.value], [y], xerr=[3 * r.std_err], fmt="none", ecolor="k", capsize=2)
    ax.set_yticks(ys)
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("value (red tick: bound, whisker: 3 SE)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_grid_figure(grid, path) -> None:
    """Step sizes over time, showing the step-control envelope."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    mids = grid.times[1:]
    ax.semilogy(mids, grid.gammas, "o-", ms=3, label="step size")
    envelope = grid.kappa * np.minimum(1.0, grid.residuals[1:])
    ax.semilogy(mids, envelope, "r--", lw=1, label="kappa * min(1, residual)")
    ax.set_xlabel("reverse time")
    ax.set_ylabel("step size")
    ax.set_title(f"{grid.scheme} grid: N={grid.n_steps}, kappa={grid.kappa:.4g}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_sweep_figure(axis: str, values: list, series: dict[str, list], path, title: str) -> None:
    """Log-log trends of each swept quantity over the axis values."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.6))
    positive_axis = all(isinstance(v, (int, float)) and v > 0 for v in values)
    for name, ys in series.items():
        ax.plot(values, ys, "o-", ms=4, label=name)
    if positive_axis and all(
        y is not None and y > 0 for ys in series.values() for y in ys
    ):
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("value")
    ax.legend(fontsize=7)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
