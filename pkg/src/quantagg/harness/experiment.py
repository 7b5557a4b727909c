"""End-to-end experiment: split, standardize, tune, aggregate, score.

One *cell* is a (dataset, seed) pair. Inside a cell, independent trainings
(hyperparameter candidates, fold models) may run on a thread pool; results
are gathered in submission order so the report does not depend on the number
of workers.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..aggregator import AggregatorConfig, Ensemble, baseline, build_oof_cube, fit_ensemble
from ..basemodels import BaseModelKind, QuantileModel
from ..grid import QuantileGrid
from ..neuralnet import TrainConfig
from ..scoring import coverage_and_length, mean_wis, pve
from .config import BASELINES, DQA_NAME, ExperimentConfig
from .data import Dataset, Standardizer, split_rows
from .report import Report

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, f"{type(exc).__name__}: {exc}") from exc


def median_column(grid: QuantileGrid, q: np.ndarray) -> np.ndarray:
    """The level-0.5 prediction, or the mean of the two central levels."""
    if grid.has_median:
        return q[:, grid.median_index]
    hi = grid.anchor_index
    return 0.5 * (q[:, hi - 1] + q[:, hi])


def _map(executor: Executor | None, fn, items):
    items = list(items)
    return list(executor.map(fn, items)) if executor else [fn(x) for x in items]


@dataclass
class CellResult:
    """Everything one (dataset, seed) cell produced, on the original scale."""

    seed: int
    preds: dict[str, np.ndarray]
    chosen: dict[str, str]
    val_wis: dict[str, float]
    rows: dict[str, np.ndarray]
    stats: Standardizer
    ensembles: dict[str, Ensemble] = field(default_factory=dict)
    base_models: list[QuantileModel] = field(default_factory=list)


def tune_base_models(
    kinds: dict[str, list[BaseModelKind]],
    X, y, val, grid: QuantileGrid, seed: int, executor: Executor | None = None,
) -> tuple[list[BaseModelKind], list[QuantileModel], dict[str, float]]:
    """Fit every candidate on the training rows and keep the best per family by validation WIS."""
    jobs = [(fam, kind) for fam, cands in kinds.items() for kind in cands]

    def run(job):
        fam, kind = job
        model = kind.fit(X, y, grid, val=val, seed=seed)
        return mean_wis(grid, model.predict(val[0]), val[1]), model

    fitted = _map(executor, run, jobs)
    best: dict[str, tuple[float, BaseModelKind, QuantileModel]] = {}
    for (fam, kind), (score, model) in zip(jobs, fitted):
        if fam not in best or score < best[fam][0]:
            best[fam] = (score, kind, model)
    fams = list(kinds)
    return [best[f][1] for f in fams], [best[f][2] for f in fams], {best[f][1].label: best[f][0] for f in fams}


def _aggregator_candidates(method: str, config: ExperimentConfig) -> list[AggregatorConfig]:
    loc, _, res = method.partition("-")
    train = TrainConfig(learning_rate=1e-3, weight_decay=1e-5, max_epochs=config.max_epochs)
    return [
        AggregatorConfig(resolution=res, locality=loc, penalty=lam, margin=("adaptive", d0),
                         hidden=tuple(config.hidden), train=train)
        for lam in config.penalty for d0 in config.delta0
    ]


def run_cell(dataset: Dataset, config: ExperimentConfig, seed: int,
             executor: Executor | None = None) -> CellResult:
    grid = config.levels
    with stage("split"):
        tr, va, te = split_rows(dataset.n, config.fractions, seed)
        if np.intersect1d(te, np.concatenate([tr, va])).size or np.intersect1d(tr, va).size:
            raise ExperimentError("split", "train/validation/test rows overlap")
        if len(tr) < 2 * config.folds:
            raise ExperimentError("split", f"{len(tr)} training rows is too few for {config.folds} folds")
    with stage("standardize"):
        stats = Standardizer.fit(dataset.X[np.concatenate([tr, va])], dataset.y[np.concatenate([tr, va])])
        Xtr, ytr = stats.x(dataset.X[tr]), stats.y(dataset.y[tr])
        Xva, yva = stats.x(dataset.X[va]), stats.y(dataset.y[va])
        Xte = stats.x(dataset.X[te])
    with stage("base models"):
        kinds, models, val_wis = tune_base_models(config.base_kinds(), Xtr, ytr, (Xva, yva), grid, seed, executor)
    with stage("out-of-fold predictions"):
        cube, _ = build_oof_cube(kinds, Xtr, ytr, grid, K=config.folds, seed=seed, val=(Xva, yva),
                                 executor=executor)
        cube.check()
    Pva = np.stack([m.predict(Xva) for m in models], axis=1)
    Pte = np.stack([m.predict(Xte) for m in models], axis=1)

    preds_z: dict[str, np.ndarray] = {}
    chosen: dict[str, str] = {}
    for kind, j in zip(kinds, range(len(kinds))):
        preds_z[f"base:{kind.name}"] = Pte[:, j]
        chosen[f"base:{kind.name}"] = kind.label

    ensembles: dict[str, Ensemble] = {}
    for method in config.methods:
        with stage(f"aggregator {method}"):
            if method in BASELINES:
                ens = baseline(method, cube, ytr, grid, models, val=(Xva, Pva, yva), seed=seed)
                chosen[method] = method
            else:
                cands = _aggregator_candidates(method, config)

                def fit_one(cfg, method=method):
                    e = fit_ensemble(cube, Xtr, ytr, grid, cfg, (Xva, Pva, yva), models, seed=seed)
                    return mean_wis(grid, e.combine(Pva, Xva), yva), e

                fitted = _map(executor, fit_one, cands)
                k = int(np.argmin([s for s, _ in fitted]))
                ens = fitted[k][1]
                val_wis[method] = fitted[k][0]
                chosen[method] = f"penalty={cands[k].penalty:g},delta0={cands[k].margin[1]:g}"
            ensembles[method] = ens
            preds_z[method] = ens.combine(Pte, Xte)

    preds = {name: stats.y_inverse(q) for name, q in preds_z.items()}
    return CellResult(seed, preds, chosen, val_wis, {"train": tr, "val": va, "test": te}, stats,
                      ensembles, models)


def score_cell(dataset: Dataset, cell: CellResult, config: ExperimentConfig) -> list[dict]:
    """Detail report rows for one cell (original response units)."""
    grid = config.levels
    te = cell.rows["test"]
    used = np.concatenate([cell.rows["train"], cell.rows["val"]])
    if np.intersect1d(te, used).size:
        raise ExperimentError("report", "test rows leaked into training")
    y = dataset.y[te]
    wis = {name: mean_wis(grid, q, y) for name, q in cell.preds.items()}
    ref = wis[DQA_NAME]
    rows = []
    for name, q in cell.preds.items():
        row = {
            "dataset": dataset.name, "seed": cell.seed, "method": name,
            "wis": wis[name], "rel_wis": wis[name] / ref,
        }
        try:
            row["pve"] = pve(median_column(grid, q), y)
        except ZeroDivisionError:
            row["pve"] = None
        for a in config.alphas:
            cov, length = coverage_and_length(grid, q, y, a)
            row[f"coverage_{a:g}"] = cov
            row[f"length_{a:g}"] = length
        row["chosen"] = cell.chosen.get(name, "")
        rows.append(row)
    return rows


def run_experiment(config: ExperimentConfig, datasets: Dataset | Sequence[Dataset],
                   workers: int | None = None) -> Report:
    """Run every (dataset, seed) cell and assemble the report."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    workers = config.workers if workers is None else workers
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    report = Report.empty(config.alphas)
    try:
        for ds in datasets:
            for seed in config.seeds:
                t0 = time.perf_counter()
                cell = run_cell(ds, config, seed, pool)
                with stage("report"):
                    report.add_rows(score_cell(ds, cell, config))
                log.info("%s seed %d done in %.1fs", ds.name, seed, time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    report.finalize()
    return report


def pve_order(report: Report, method: str = DQA_NAME) -> list[tuple[str, float]]:
    """Datasets sorted by the mean PVE of ``method`` (nondecreasing)."""
    vals = [(r["dataset"], r["pve"]) for r in report.aggregate_rows()
            if r["method"] == method and r["pve"] is not None]
    return sorted(vals, key=lambda t: (t[1], t[0]))
