"""CSV ingestion, datasets, and location-scale standardization."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class Standardizer:
    """Per-column mean/sd for X and y; zero-variance columns are dropped."""

    x_mean: np.ndarray
    x_sd: np.ndarray
    keep: np.ndarray
    y_mean: float
    y_sd: float

    @classmethod
    def fit(cls, X, y) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        sd = X.std(axis=0)
        keep = np.flatnonzero(sd > 0)
        if keep.size < X.shape[1]:
            log.warning("dropping %d constant feature column(s)", X.shape[1] - keep.size)
        y_sd = float(y.std())
        if not y_sd > 0:
            raise DataError("response is constant on the training rows")
        return cls(X.mean(axis=0)[keep], sd[keep], keep, float(y.mean()), y_sd)

    def x(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)[:, self.keep]
        return (X - self.x_mean) / self.x_sd

    def y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_sd

    def y_inverse(self, z) -> np.ndarray:
        """Undo the response standardization (quantiles map level by level)."""
        return np.asarray(z, dtype=float) * self.y_sd + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_sd": self.x_sd.tolist(), "keep": self.keep.tolist(),
                "y_mean": self.y_mean, "y_sd": self.y_sd}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["x_mean"], dtype=float), np.asarray(d["x_sd"], dtype=float),
                   np.asarray(d["keep"], dtype=int), float(d["y_mean"]), float(d["y_sd"]))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: list[str]
    target: str = "y"
    name: str = "data"
    rejected: int = 0
    stats: Standardizer | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"X has shape {self.X.shape} but y has {self.y.shape[0]} rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return len(self.y)

    def standardize(self, rows) -> Standardizer:
        """Fit (and store) standardization on the given rows only."""
        rows = np.asarray(rows)
        self.stats = Standardizer.fit(self.X[rows], self.y[rows])
        return self.stats

    @classmethod
    def synthetic(cls, name: str, n: int, seed: int = 0) -> "Dataset":
        from .synthetic import GENERATORS

        if name not in GENERATORS:
            raise DataError(f"unknown synthetic dataset {name!r}; known: {sorted(GENERATORS)}")
        X, y, _ = GENERATORS[name](n, seed=seed)
        return cls(X, y, [f"x{j + 1}" for j in range(X.shape[1])], "y", name)


def ingest_csv(path, target_column: str) -> Dataset:
    """Read a headed numeric CSV.

    Rows with a non-numeric or non-finite cell, or the wrong number of cells,
    are skipped and logged with their line number. A missing target column is a
    hard error.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        if target_column not in header:
            raise DataError(
                f"target column {target_column!r} not found; available columns: {', '.join(header)}"
            )
        t = header.index(target_column)
        rows, rejected = [], 0
        for line_no, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            try:
                if len(cells) != len(header):
                    raise ValueError(f"expected {len(header)} cells, found {len(cells)}")
                vals = [float(c) for c in cells]
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite value")
            except ValueError as exc:
                rejected += 1
                log.warning("%s line %d rejected: %s", path.name, line_no, exc)
                continue
            rows.append(vals)
    if rejected:
        log.warning("%s: %d row(s) rejected", path.name, rejected)
    if not rows:
        raise DataError(f"{path} has no usable rows")
    A = np.asarray(rows, dtype=float)
    features = [c for j, c in enumerate(header) if j != t]
    X = np.delete(A, t, axis=1)
    return Dataset(X, A[:, t], features, target_column, path.stem, rejected)


def split_rows(n: int, fractions=(0.72, 0.18, 0.10), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded train/validation/test index split (each sorted)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]), np.sort(perm[n_tr + n_va:])
