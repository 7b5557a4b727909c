"""Experiment reports: detail rows per (dataset, seed, method) plus aggregates.

Every float is rounded to 6 significant digits when it enters the report, so
the CSV and JSON forms parse back to exactly the same values.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

AGGREGATE_SEED = "mean"
TEXT_COLUMNS = ("dataset", "method", "chosen")


def sig6(v):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return v
    return float(f"{v:.6g}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class Report:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    finalized: bool = False

    @classmethod
    def empty(cls, alphas: Sequence[float] = ()) -> "Report":
        cols = ["dataset", "seed", "method", "wis", "wis_se", "rel_wis", "rel_wis_se", "pve"]
        for a in alphas:
            cols += [f"coverage_{a:g}", f"length_{a:g}"]
        cols.append("chosen")
        return cls(cols)

    def add_rows(self, rows: Sequence[dict]) -> None:
        if self.finalized:
            raise RuntimeError("report is already finalized")
        for r in rows:
            clean = {}
            for c in self.columns:
                v = r.get(c)
                clean[c] = v if c in TEXT_COLUMNS or c == "seed" else sig6(v)
            self.rows.append(clean)

    def detail_rows(self) -> list[dict]:
        return [r for r in self.rows if r["seed"] != AGGREGATE_SEED]

    def aggregate_rows(self) -> list[dict]:
        return [r for r in self.rows if r["seed"] == AGGREGATE_SEED]

    def finalize(self) -> None:
        """Append one mean row (with standard errors) per (dataset, method)."""
        if self.finalized:
            return
        groups: dict[tuple[str, str], list[dict]] = {}
        for r in self.detail_rows():
            groups.setdefault((r["dataset"], r["method"]), []).append(r)
        numeric = [c for c in self.columns if c not in TEXT_COLUMNS and c != "seed" and not c.endswith("_se")]
        agg = []
        for (ds, method), rs in groups.items():
            row = {"dataset": ds, "seed": AGGREGATE_SEED, "method": method, "chosen": ""}
            for c in numeric:
                vals = [r[c] for r in rs if r[c] is not None]
                row[c] = sum(vals) / len(vals) if vals else None
            for c in ("wis", "rel_wis"):
                vals = [r[c] for r in rs]
                if len(vals) > 1:
                    mu = sum(vals) / len(vals)
                    var = sum((v - mu) ** 2 for v in vals) / (len(vals) - 1)
                    row[f"{c}_se"] = math.sqrt(var / len(vals))
                else:
                    row[f"{c}_se"] = None
            agg.append(row)
        self.add_rows(agg)
        self.finalized = True

    def value(self, method: str, column: str, dataset: str | None = None, seed=AGGREGATE_SEED):
        for r in self.rows:
            if r["method"] == method and r["seed"] == seed and (dataset is None or r["dataset"] == dataset):
                return r[column]
        raise KeyError((dataset, seed, method))

    # -- serialization -----------------------------------------------------

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"columns": self.columns, "rows": self.rows}, indent=1))

    @classmethod
    def from_csv(cls, path) -> "Report":
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            rows = []
            for cells in reader:
                row = {}
                for c, s in zip(columns, cells):
                    if c in TEXT_COLUMNS:
                        row[c] = s
                    elif c == "seed":
                        row[c] = s if s == AGGREGATE_SEED else int(s)
                    else:
                        row[c] = None if s == "" else float(s)
                rows.append(row)
        return cls(columns, rows, finalized=True)

    @classmethod
    def from_json(cls, path) -> "Report":
        blob = json.loads(Path(path).read_text())
        return cls(blob["columns"], blob["rows"], finalized=True)


def emit_report(report: Report, path, fmt: str = "csv") -> Path:
    """Write ``report`` as csv or json. An unwritable path raises ``OSError``."""
    path = Path(path)
    if fmt == "csv":
        report.to_csv(path)
    elif fmt == "json":
        report.to_json(path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path
