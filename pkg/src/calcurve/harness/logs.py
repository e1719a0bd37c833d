"""Versioned CSV trajectory logs and the bound-report sidecar."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import FormatError
from ..margins import BoundReport

TRAJECTORY_VERSION = "# calcurve-trajectory v1"
BOUNDS_VERSION = "# calcurve-bounds v1"

COLUMNS = ("step", "split", "loss", "accuracy", "ece", "mce", "kce", "mean_margin", "min_margin", "q_d",
           "q0_eps", "lambda_max", "batch_sharpness", "cj_estimate", "probe_converged")
BOUND_COLUMNS = ("step", "split", "bound_id", "lhs", "rhs", "slack", "holds", "tol", "kind")
_INT_COLS = {"step"}
_STR_COLS = {"split"}
_BOOL_COLS = {"probe_converged"}


def fmt(v) -> str:
    """Shortest round-tripping text for a value; empty string for missing."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(col: str, text: str):
    if text == "":
        return None
    if col in _INT_COLS:
        return int(text)
    if col in _STR_COLS:
        return text
    if col in _BOOL_COLS:
        return text == "1"
    return float(text)


@dataclass
class TrajectoryLog:
    rows: list[dict] = field(default_factory=list)
    status: str = "ok"
    note: str = ""

    def append(self, row: dict) -> None:
        missing = set(COLUMNS) - set(row)
        if missing:
            raise FormatError(f"trajectory row lacks {sorted(missing)}")
        last = [r["step"] for r in self.rows if r["split"] == row["split"]]
        if last and row["step"] <= last[-1]:
            raise FormatError("trajectory steps must increase strictly within a split")
        self.rows.append({c: row[c] for c in COLUMNS})

    def series(self, column: str, split: str = "train") -> list:
        return [r[column] for r in self.rows if r["split"] == split]

    def steps(self, split: str = "train") -> list[int]:
        return self.series("step", split)

    def splits(self) -> list[str]:
        return sorted({r["split"] for r in self.rows})

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(TRAJECTORY_VERSION + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([fmt(r[c]) for c in COLUMNS])
        if self.status != "ok":
            buf.write(f"# status: {self.status} {self.note}".rstrip() + "\n")
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrajectoryLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != TRAJECTORY_VERSION:
            raise FormatError(f"{path}: unknown trajectory log version {lines[0] if lines else '(empty)'!r}")
        status, note = "ok", ""
        body = []
        for ln in lines[1:]:
            if ln.startswith("# status: "):
                status, _, note = ln[len("# status: "):].partition(" ")
            elif ln and not ln.startswith("#"):
                body.append(ln)
        reader = csv.reader(body)
        header = next(reader, None)
        if header is None or tuple(header) != COLUMNS:
            raise FormatError(f"{path}: unexpected trajectory header")
        log = cls(status=status, note=note)
        for rec in reader:
            log.rows.append({c: _parse(c, t) for c, t in zip(COLUMNS, rec)})
        return log


def write_bounds(path, entries: list[tuple[int, str, BoundReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(BOUNDS_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUND_COLUMNS)
        for step, split_name, r in entries:
            holds = "" if r.holds is None else ("1" if r.holds else "0")
            w.writerow([step, split_name, r.bound_id, fmt(r.lhs), fmt(r.rhs), fmt(r.slack), holds, fmt(r.tol), r.kind])


def read_bounds(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != BOUNDS_VERSION:
        raise FormatError(f"{path}: unknown bounds log version")
    reader = csv.DictReader(lines[1:])
    if tuple(reader.fieldnames or ()) != BOUND_COLUMNS:
        raise FormatError(f"{path}: unexpected bounds header")
    out = []
    for r in reader:
        out.append({
            "step": int(r["step"]), "split": r["split"], "bound_id": r["bound_id"],
            "lhs": float(r["lhs"]), "rhs": float(r["rhs"]), "slack": float(r["slack"]),
            "holds": None if r["holds"] == "" else r["holds"] == "1",
            "tol": float(r["tol"]), "kind": r["kind"],
        })
    return out
