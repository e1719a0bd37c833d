"""Pearson correlations across trajectory logs and tidy plot-data export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import SpecError, UndefinedCorrelation
from .logs import COLUMNS, TrajectoryLog, fmt

DEFAULT_PAIRS = (("ece", "lambda_max"), ("kce", "lambda_max"))
PLOT_KINDS = ("trajectory", "reliability", "scatter-ece-sharpness")


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise SpecError("pearson needs two equal-length series of length >= 2")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise SpecError("pearson series contain missing or non-finite values")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("correlation undefined for a constant series")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


@dataclass
class CorrelationRow:
    x: str
    y: str
    split: str
    per_run: list[float | None]  # None marks an undefined correlation
    mean: float | None
    std: float | None


def correlation_report(logs: list[TrajectoryLog], pairs=DEFAULT_PAIRS, split: str = "train") -> list[CorrelationRow]:
    """Per-run Pearson r for each column pair plus mean and population std across runs."""
    if not logs:
        raise SpecError("need at least one log")
    if not pairs:
        raise SpecError("need at least one column pair")
    grid = logs[0].steps(split)
    for lg in logs[1:]:
        if lg.steps(split) != grid:
            raise SpecError("runs were probed on different step grids")
    out = []
    for x, y in pairs:
        for c in (x, y):
            if c not in COLUMNS:
                raise SpecError(f"unknown column {c!r}")
        rs = []
        for lg in logs:
            try:
                rs.append(pearson(lg.series(x, split), lg.series(y, split)))
            except (UndefinedCorrelation, SpecError):
                rs.append(None)
        good = np.array([r for r in rs if r is not None])
        mean = float(good.mean()) if good.size else None
        std = float(good.std()) if good.size else None
        out.append(CorrelationRow(x, y, split, rs, mean, std))
    return out


def write_correlation_csv(rows: list[CorrelationRow], path=None, run_names=None) -> str:
    """Long-format CSV; undefined values are written as the word ``undefined``."""
    def cell(v):
        return "undefined" if v is None else fmt(v)

    lines = [["x", "y", "split", "run", "r"]]
    for row in rows:
        names = run_names or [str(i) for i in range(len(row.per_run))]
        for name, r in zip(names, row.per_run):
            lines.append([row.x, row.y, row.split, name, cell(r)])
        lines.append([row.x, row.y, row.split, "mean", cell(row.mean)])
        lines.append([row.x, row.y, row.split, "std", cell(row.std)])
    text = "\n".join(",".join(map(str, ln)) for ln in lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def emit_plot_data(log: TrajectoryLog, kind: str, out_dir, columns=None, reliability=None, run: str = "run") -> Path:
    """Write one tidy CSV for a plotting tool and return its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "trajectory":
        cols = tuple(columns) if columns is not None else COLUMNS
        if not cols:
            raise SpecError("empty column request")
        bad = [c for c in cols if c not in COLUMNS]
        if bad:
            raise SpecError(f"unknown columns {bad}")
        path = out_dir / "plot_trajectory.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in log.rows:
                w.writerow([fmt(r[c]) for c in cols])
        return path
    if kind == "reliability":
        if reliability is None:
            raise SpecError("reliability plot data needs a ReliabilityTable")
        path = out_dir / "plot_reliability.csv"
        reliability.to_csv(path)
        return path
    if kind == "scatter-ece-sharpness":
        path = out_dir / "plot_scatter.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "split", "step", "ece", "lambda_max"])
            for r in log.rows:
                w.writerow([run, r["split"], r["step"], fmt(r["ece"]), fmt(r["lambda_max"])])
        return path
    raise SpecError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
