"""Conformalized quantile regression: split CQR, CV+, and nested CV+ for ensembles.

For every ``alpha`` on the grid, the central interval
``[g(x; alpha/2), g(x; 1 - alpha/2)]`` is widened or shrunk using quantiles
of calibration residuals. Endpoints that the calibration set is too small to
bound come back as ``-inf``/``+inf``.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from concurrent.futures import Executor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .aggregator import (
    AggregatorConfig,
    BasePredCube,
    Ensemble,
    ProvenanceError,
    fit_ensemble,
    make_folds,
)
from .basemodels import BaseModelKind, QuantileModel
from .grid import QuantileGrid

log = logging.getLogger(__name__)


class Predictor(Protocol):
    def predict(self, X) -> np.ndarray: ...


def _rank(tau: float, n: int) -> int:
    # guard against tau*(n+1) landing a hair above an integer
    return math.ceil(tau * (n + 1) - 1e-9)


def modified_quantile(values, tau: float) -> float:
    """The ``ceil(tau (n+1))``-th order statistic, or ``+inf`` past the end."""
    s = np.sort(np.asarray(values, dtype=float).ravel())
    n = s.size
    if n == 0:
        raise ValueError("modified quantile of an empty set")
    k = _rank(tau, n)
    if k > n:
        return math.inf
    return float(s[max(k, 1) - 1])


def modified_quantile_lower(values, tau: float) -> float:
    """Mirror image ``-modified_quantile(-values, tau)``; ``-inf`` when unbounded."""
    return -modified_quantile(-np.asarray(values, dtype=float), tau)


def _modified_quantile_rows(values: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise :func:`modified_quantile` of a ``(T, n)`` array."""
    n = values.shape[1]
    k = _rank(tau, n)
    if k > n:
        return np.full(values.shape[0], np.inf)
    return np.partition(values, max(k, 1) - 1, axis=1)[:, max(k, 1) - 1]


@dataclass
class ConformalResiduals:
    """Per-alpha lower/upper calibration residuals with their fold labels."""

    lower: dict[float, np.ndarray]
    upper: dict[float, np.ndarray]
    fold_of: np.ndarray


def residuals(grid: QuantileGrid, preds: np.ndarray, y, alphas: Sequence[float]) -> tuple[dict, dict]:
    """``R- = g(x; alpha/2) - y`` and ``R+ = y - g(x; 1 - alpha/2)`` for each alpha."""
    y = np.asarray(y, dtype=float)
    lower, upper = {}, {}
    for a in alphas:
        lo, hi = grid.alpha_indices(a)
        lower[a] = preds[:, lo] - y
        upper[a] = y - preds[:, hi]
    return lower, upper


@dataclass
class ConformalModel:
    """A conformalized quantile predictor.

    ``mode == "split"``: ``base`` was fit on the proper training set and
    ``offsets[alpha] = (o_minus, o_plus)`` shift the interval endpoints.
    ``mode == "cv+"``: ``fold_models[k]`` excludes fold ``k`` and the residuals
    of the rows in fold ``k`` are combined per test point.
    """

    mode: str
    grid: QuantileGrid
    alphas: list[float]
    base: Predictor | None = None
    offsets: dict[float, tuple[float, float]] = field(default_factory=dict)
    fold_models: list[Predictor] = field(default_factory=list)
    resid: ConformalResiduals | None = None
    fit_counts: Counter = field(default_factory=Counter)

    def intervals(self, X) -> dict[float, tuple[np.ndarray, np.ndarray]]:
        """Conformalized ``(lower, upper)`` arrays for every alpha."""
        if self.mode == "split":
            q = self.base.predict(X)
            out = {}
            for a in self.alphas:
                lo, hi = self.grid.alpha_indices(a)
                o_minus, o_plus = self.offsets[a]
                out[a] = (q[:, lo] - o_minus, q[:, hi] + o_plus)
            return out
        fold_preds = [m.predict(X) for m in self.fold_models]
        return cv_plus(fold_preds, self.resid, self.grid, self.alphas)


def split_cqr(
    base: Predictor,
    X_cal,
    y_cal,
    grid: QuantileGrid,
    alphas: Sequence[float] | None = None,
    train_rows: Sequence[int] | None = None,
    cal_rows: Sequence[int] | None = None,
) -> ConformalModel:
    """Split-sample CQR.

    When row ids are supplied, any overlap between the proper training set and
    the calibration set raises :class:`ProvenanceError`.
    """
    if train_rows is not None and cal_rows is not None:
        if np.intersect1d(np.asarray(train_rows), np.asarray(cal_rows)).size:
            raise ProvenanceError("calibration rows were used to fit the base model")
    alphas = list(grid.alphas if alphas is None else alphas)
    preds = base.predict(X_cal)
    lower, upper = residuals(grid, preds, y_cal, alphas)
    offsets = {}
    for a in alphas:
        offsets[a] = (modified_quantile(lower[a], 1 - a / 2), modified_quantile(upper[a], 1 - a / 2))
    n2 = len(np.asarray(y_cal))
    resid = ConformalResiduals(lower, upper, np.zeros(n2, dtype=int))
    return ConformalModel("split", grid, alphas, base=base, offsets=offsets, resid=resid)


def cv_plus(
    fold_preds: Sequence[np.ndarray],
    resid: ConformalResiduals,
    grid: QuantileGrid,
    alphas: Sequence[float],
) -> dict[float, tuple[np.ndarray, np.ndarray]]:
    """CV+ endpoints from per-fold test predictions ``fold_preds[k]`` of shape ``(T, m)``.

    Row ``i`` of the calibration residuals is paired with the prediction of the
    model that excluded its fold.
    """
    K = len(fold_preds)
    if K < 2:
        raise ValueError("CV+ needs at least two folds")
    fold_of = resid.fold_of
    if fold_of.min() < 0 or fold_of.max() >= K:
        raise ProvenanceError("residual fold labels do not match the fold models")
    stacked = np.stack(fold_preds)  # (K, T, m)
    out = {}
    for a in alphas:
        lo, hi = grid.alpha_indices(a)
        low_vals = stacked[fold_of, :, lo].T - resid.lower[a][None, :]  # (T, n)
        up_vals = stacked[fold_of, :, hi].T + resid.upper[a][None, :]
        lower = -_modified_quantile_rows(-low_vals, 1 - a / 2)
        upper = _modified_quantile_rows(up_vals, 1 - a / 2)
        out[a] = (lower, upper)
    return out


class AveragedModel:
    """Averages the predictions of several fitted models (same grid)."""

    def __init__(self, models: Sequence[QuantileModel]):
        self.models = list(models)

    def predict(self, X) -> np.ndarray:
        return np.mean([m.predict(X) for m in self.models], axis=0)


class _FoldEnsemble:
    def __init__(self, ensemble: Ensemble):
        self.ensemble = ensemble

    def predict(self, X) -> np.ndarray:
        return self.ensemble.predict(X)


def nested_conformalize(
    kinds: Sequence[BaseModelKind],
    config: AggregatorConfig,
    X,
    y,
    grid: QuantileGrid,
    K: int = 5,
    seed: int = 0,
    val=None,
    alphas: Sequence[float] | None = None,
    executor: Executor | None = None,
) -> ConformalModel:
    """CV+ around a quantile aggregator with pair-shared inner base models.

    For each outer fold ``k``, the aggregator is trained on the other folds
    using out-of-fold predictions from base models ``g_j^{-k,l}`` (trained
    without folds ``k`` and ``l``). Since ``g^{-k,l} == g^{-l,k}``, each base
    model is trained once per unordered pair: ``K(K-1)/2`` times in total.
    At prediction time the fold-``k`` aggregator feeds on the average of its
    ``K - 1`` inner base models, so no further base fits are needed.

    ``val = (X_val, y_val)`` drives early stopping; without it a seeded 15%
    of the rows is held out for that purpose.
    """
    if K < 3:
        raise ValueError("nested CV+ needs K >= 3")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if val is None:
        perm = np.random.default_rng(seed + 104729).permutation(len(y))
        n_val = max(1, int(round(0.15 * len(y))))
        vi, keep = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        val = (X[vi], y[vi])
        X, y = X[keep], y[keep]
    alphas = list(grid.alphas if alphas is None else alphas)
    fold_of = make_folds(len(y), K, seed)
    counts: Counter = Counter()

    pairs = list(combinations(range(K), 2))
    jobs = [(pair, j, kind) for pair in pairs for j, kind in enumerate(kinds)]

    def fit_pair(job):
        (k, l), j, kind = job
        rows = np.flatnonzero((fold_of != k) & (fold_of != l))
        model = kind.fit(X[rows], y[rows], grid, val=val, seed=seed * 1000 + 31 * k + 7 * l + j)
        return rows, model

    fitted = list(executor.map(fit_pair, jobs)) if executor else [fit_pair(job) for job in jobs]
    cache: dict[frozenset, list] = {}
    rows_of: dict[frozenset, np.ndarray] = {}
    for ((k, l), j, kind), (rows, model) in zip(jobs, fitted):
        key = frozenset((k, l))
        cache.setdefault(key, [None] * len(kinds))[j] = model
        rows_of[key] = rows
        counts[kind.label] += 1

    def pair_models(k, l):
        key = frozenset((k, l))
        if key not in cache or any(m is None for m in cache[key]):
            raise RuntimeError(f"internal error: base models for folds {sorted(key)} missing")
        return cache[key]

    def fit_outer(k):
        outer = np.flatnonzero(fold_of != k)
        inner_fold = fold_of[outer]
        labels = sorted(set(inner_fold.tolist()))
        remap = {l: i for i, l in enumerate(labels)}
        preds = np.empty((outer.size, len(kinds), grid.m))
        train_rows = []
        for l in labels:
            models = pair_models(k, l)
            held = inner_fold == l
            for j, model in enumerate(models):
                preds[held, j] = model.predict(X[outer[held]])
            pair_rows = rows_of[frozenset((k, l))]
            train_rows.append(np.flatnonzero(np.isin(outer, pair_rows)))
        cube = BasePredCube(preds, np.array([remap[l] for l in inner_fold]), train_rows,
                            [kind.label for kind in kinds])
        cube.check()
        averaged = [AveragedModel([pair_models(k, l)[j] for l in labels]) for j in range(len(kinds))]
        Pv = np.stack([m.predict(val[0]) for m in averaged], axis=1)
        ens = fit_ensemble(cube, X[outer], y[outer], grid, config, (val[0], Pv, val[1]),
                           base_models=averaged, seed=seed * 1000 + k)
        return ens

    ensembles = list(executor.map(fit_outer, range(K))) if executor else [fit_outer(k) for k in range(K)]

    lower = {a: np.empty(len(y)) for a in alphas}
    upper = {a: np.empty(len(y)) for a in alphas}
    for k, ens in enumerate(ensembles):
        held = fold_of == k
        # the fold-k aggregator never saw fold k, at either level
        for key, rows in rows_of.items():
            if k in key and np.any(fold_of[rows] == k):
                raise ProvenanceError(f"fold {k} rows leaked into a base model")
        lo_k, up_k = residuals(grid, ens.predict(X[held]), y[held], alphas)
        for a in alphas:
            lower[a][held] = lo_k[a]
            upper[a][held] = up_k[a]

    resid = ConformalResiduals(lower, upper, fold_of)
    return ConformalModel("cv+", grid, alphas, fold_models=[_FoldEnsemble(e) for e in ensembles],
                          resid=resid, fit_counts=counts)


@dataclass
class ConformalReportRow:
    alpha: float
    coverage: float
    mean_length: float
    unbounded_count: int


def evaluate_intervals(intervals: dict[float, tuple[np.ndarray, np.ndarray]], y) -> list[ConformalReportRow]:
    """Coverage and mean finite length per alpha; unbounded endpoints are counted."""
    y = np.asarray(y, dtype=float)
    rows = []
    for a in sorted(intervals):
        lo, hi = intervals[a]
        covered = (lo <= y) & (y <= hi)
        finite = np.isfinite(lo) & np.isfinite(hi)
        length = float(np.mean((hi - lo)[finite])) if finite.any() else math.nan
        rows.append(ConformalReportRow(float(a), float(covered.mean()), length, int((~finite).sum())))
    return rows


def nestedness_violations(intervals: dict[float, tuple[np.ndarray, np.ndarray]]) -> int:
    """Points where a smaller-alpha interval fails to contain a larger-alpha one."""
    alphas = sorted(intervals)
    bad = 0
    for a_small, a_big in zip(alphas[:-1], alphas[1:]):
        lo_s, hi_s = intervals[a_small]
        lo_b, hi_b = intervals[a_big]
        bad += int(np.sum((lo_s > lo_b) | (hi_s < hi_b)))
    return bad


def write_report(path, rows: Sequence[ConformalReportRow]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "coverage", "mean_length", "unbounded_count"])
        for r in rows:
            w.writerow([f"{r.alpha:.6g}", f"{r.coverage:.6g}", f"{r.mean_length:.6g}", r.unbounded_count])
