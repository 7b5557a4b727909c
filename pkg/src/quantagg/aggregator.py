"""Weighted quantile ensembles: out-of-fold cubes, weight fitting, baselines.

Ensemble predictions are linear combinations of base-model quantiles,

    g(x; tau) = sum_j sum_nu w[tau, j, nu](x) * g_j(x; nu),

where the weights live on a simplex per output level. Three resolutions are
supported (coarse: one weight per model; medium: one per model and level;
fine: a full level-to-level matrix per model) and two localities (global
weights, or weights emitted per ``x`` by a gating network). Weights are
parametrized through a softmax so SGD needs no explicit constraints.
"""
from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .basemodels import BaseModelKind, QuantileModel, Scaler
from .empirical import empirical_quantile
from .grid import QuantileGrid
from .isotonic import isotonize
from .neuralnet import MlpSpec, TrainConfig, forward, init_params, train_until_stop
from .neuralnet import autodiff as ad
from .neuralnet.checkpoint import params_from_dict, params_to_dict
from .scoring import mean_wis

log = logging.getLogger(__name__)

RESOLUTIONS = ("coarse", "medium", "fine")
LOCALITIES = ("global", "local")
ISO_STAGES = ("none", "post", "end_to_end")
SIMPLEX_TOL = 1e-9
FINE_DIAGONAL_BOOST = 2.0


class ProvenanceError(RuntimeError):
    """An out-of-fold prediction was produced by a model that saw its row."""


class ContractError(ValueError):
    pass


# -- out-of-fold cube ----------------------------------------------------------


def make_folds(n: int, K: int, seed: int) -> np.ndarray:
    """Seeded random partition of ``range(n)`` into ``K`` near-equal folds."""
    if K < 2:
        raise ValueError("need at least two folds")
    if n < K:
        raise ValueError(f"cannot split {n} rows into {K} nonempty folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    for k, part in enumerate(np.array_split(perm, K)):
        fold_of[part] = k
    return fold_of


@dataclass
class BasePredCube:
    """Out-of-fold base predictions ``preds[i, j, nu]`` with fold provenance.

    ``train_rows[k]`` lists the rows used to train the fold-``k`` models;
    :meth:`check` asserts none of them carries fold label ``k``.
    """

    preds: np.ndarray
    fold_of: np.ndarray
    train_rows: list[np.ndarray]
    labels: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.preds.shape[0]

    @property
    def p(self) -> int:
        return self.preds.shape[1]

    def check(self) -> None:
        for k, rows in enumerate(self.train_rows):
            if np.any(self.fold_of[rows] == k):
                raise ProvenanceError(f"fold {k} models were trained on their own rows")


FitFn = Callable[[BaseModelKind, np.ndarray, np.ndarray, int], QuantileModel]


def build_oof_cube(
    kinds: Sequence[BaseModelKind],
    X,
    y,
    grid: QuantileGrid,
    K: int = 5,
    seed: int = 0,
    val=None,
    executor: Executor | None = None,
    fit_hook: Callable[[BaseModelKind, int], None] | None = None,
) -> tuple[BasePredCube, list[list[QuantileModel]]]:
    """Fit every base model ``K`` times, each time leaving one fold out.

    Returns the cube and the fold models as ``models[k][j]``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    fold_of = make_folds(n, K, seed)
    jobs = []
    for k in range(K):
        rows = np.flatnonzero(fold_of != k)
        for j, kind in enumerate(kinds):
            jobs.append((k, j, kind, rows))

    def run(job):
        k, j, kind, rows = job
        if fit_hook is not None:
            fit_hook(kind, k)
        return kind.fit(X[rows], y[rows], grid, val=val, seed=seed * 1000 + 17 * k + j)

    fitted = list(executor.map(run, jobs)) if executor else [run(job) for job in jobs]
    models = [[None] * len(kinds) for _ in range(K)]
    preds = np.empty((n, len(kinds), grid.m))
    train_rows = [None] * K
    for (k, j, _, rows), model in zip(jobs, fitted):
        models[k][j] = model
        train_rows[k] = rows
        held = fold_of == k
        preds[held, j] = model.predict(X[held])
    cube = BasePredCube(preds, fold_of, train_rows, [kind.label for kind in kinds])
    cube.check()
    return cube, models


# -- margins and penalty -------------------------------------------------------


def adaptive_margins(oof_residuals, grid: QuantileGrid, delta0: float) -> np.ndarray:
    """``delta[i, k] = delta0 * (Q_{tau_k}(R) - Q_{tau_i}(R))_+`` for ``i < k``."""
    r = np.asarray(oof_residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("need at least one residual")
    if delta0 < 0:
        raise ValueError("delta0 must be nonnegative")
    q = empirical_quantile(r, grid.levels)
    gaps = np.maximum(q[None, :] - q[:, None], 0.0)
    return np.triu(delta0 * gaps, 1)


def constant_margins(grid: QuantileGrid, delta: float) -> np.ndarray:
    if delta < 0:
        raise ValueError("margin must be nonnegative")
    return np.triu(np.full((grid.m, grid.m), float(delta)), 1)


def pilot_residuals(cube: BasePredCube, y, grid: QuantileGrid) -> np.ndarray:
    """Residuals around the average of the base models' out-of-fold medians."""
    mid = grid.anchor_index
    return np.asarray(y, dtype=float) - cube.preds[:, :, mid].mean(axis=1)


def crossing_penalty(preds, margins) -> float:
    """``sum_x sum_{tau < tau'} (g(x; tau) - g(x; tau') + delta)_+``."""
    q = np.atleast_2d(np.asarray(preds, dtype=float))
    m = q.shape[1]
    iu, ku = np.triu_indices(m, k=1)
    d = q[:, iu] - q[:, ku] + np.asarray(margins, dtype=float)[iu, ku]
    return float(np.maximum(d, 0.0).sum())


# -- weights -------------------------------------------------------------------

_EINSUM = {
    ("global", "coarse"): "j,bjt->bt",
    ("global", "medium"): "tj,bjt->bt",
    ("global", "fine"): "tjv,bjv->bt",
    ("local", "coarse"): "bj,bjt->bt",
    ("local", "medium"): "btj,bjt->bt",
    ("local", "fine"): "btjv,bjv->bt",
}


def _logit_shape(resolution: str, p: int, m: int) -> tuple[int, ...]:
    return {"coarse": (p,), "medium": (m, p), "fine": (m, p * m)}[resolution]


def _weight_shape(resolution: str, p: int, m: int) -> tuple[int, ...]:
    return {"coarse": (p,), "medium": (m, p), "fine": (m, p, m)}[resolution]


@dataclass
class WeightSpec:
    """Fitted aggregation weights, global or produced by a gating network.

    Global weights are stored directly (``weights``). Local weights are the
    output of ``gate`` (an ELU network whose last layer emits the logits for
    every output level), evaluated on standardized features via ``scaler``.
    """

    resolution: str
    locality: str
    p: int
    m: int
    weights: np.ndarray | None = None
    gate: MlpSpec | None = None
    gate_params: dict[str, np.ndarray] | None = None
    scaler: Scaler | None = None

    def __post_init__(self):
        if self.resolution not in RESOLUTIONS or self.locality not in LOCALITIES:
            raise ContractError(f"bad weight spec {self.resolution}/{self.locality}")
        if self.locality == "global" and self.weights is not None:
            check_simplex(self.weights, self.resolution)

    @classmethod
    def uniform(cls, resolution: str, p: int, m: int) -> "WeightSpec":
        w = np.zeros(_weight_shape(resolution, p, m))
        if resolution == "coarse":
            w[:] = 1.0 / p
        elif resolution == "medium":
            w[:] = 1.0 / p
        else:
            for t in range(m):
                w[t, :, t] = 1.0 / p
        return cls(resolution, "global", p, m, weights=w)

    def emit(self, X=None) -> np.ndarray:
        """Weights at ``X`` (local) or the global weight array."""
        if self.locality == "global":
            return self.weights
        if X is None:
            raise ContractError("local weights need feature points")
        leaves = {k: ad.leaf(v) for k, v in self.gate_params.items()}
        logits = forward(self.gate, leaves, self.scaler.transform(X)).value
        return _logits_to_weights(ad.leaf(logits), self.resolution, self.p, self.m, batch=True).value

    def to_fine(self, X=None) -> np.ndarray:
        """Embed the weights as fine weights ``(…, m, p, m)``; diagonal for coarse/medium."""
        w = self.emit(X)
        m = self.m
        eye = np.eye(m)
        if self.resolution == "fine":
            return w
        if self.resolution == "coarse":
            return np.einsum("...j,tv->...tjv", w, eye)
        return np.einsum("...tj,tv->...tjv", w, eye)

    def to_dict(self) -> dict:
        d = {"resolution": self.resolution, "locality": self.locality, "p": self.p, "m": self.m}
        if self.locality == "global":
            d["weights"] = {"shape": list(self.weights.shape), "data": self.weights.ravel().tolist()}
        else:
            d["gate"] = {"layer_sizes": list(self.gate.layer_sizes), "dropout_rate": self.gate.dropout_rate}
            d["gate_params"] = params_to_dict(self.gate_params)
            d["scaler"] = self.scaler.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WeightSpec":
        if d["locality"] == "global":
            w = np.asarray(d["weights"]["data"], dtype=float).reshape(d["weights"]["shape"])
            return cls(d["resolution"], "global", d["p"], d["m"], weights=w)
        gate = MlpSpec(tuple(d["gate"]["layer_sizes"]), d["gate"]["dropout_rate"])
        params, _ = params_from_dict(d["gate_params"])
        return cls(d["resolution"], "local", d["p"], d["m"], gate=gate, gate_params=params,
                   scaler=Scaler.from_dict(d["scaler"]))


def check_simplex(w, resolution: str, tol: float = SIMPLEX_TOL) -> None:
    """Raise unless ``w`` is nonnegative with unit sums per output level."""
    w = np.asarray(w, dtype=float)
    if np.any(w < -tol):
        raise ContractError("aggregation weights must be nonnegative")
    axes = {"coarse": (-1,), "medium": (-1,), "fine": (-2, -1)}[resolution]
    sums = w.sum(axis=axes)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ContractError(f"weights violate the unit-sum constraint (max error {np.max(np.abs(sums - 1)):.3g})")


def apply_weights(w: WeightSpec, base_preds, X=None) -> np.ndarray:
    """Combine base predictions ``(n, p, m)`` (or ``(p, m)``) with ``w``."""
    P = np.asarray(base_preds, dtype=float)
    single = P.ndim == 2
    if single:
        P = P[None]
        X = None if X is None else np.atleast_2d(X)
    if P.shape[1:] != (w.p, w.m):
        raise ContractError(f"base predictions {P.shape[1:]} do not match weights ({w.p}, {w.m})")
    weights = w.emit(X)
    check_simplex(weights, w.resolution)
    out = np.einsum(_EINSUM[(w.locality, w.resolution)], weights, P)
    return out[0] if single else out


def _logits_to_weights(logits: ad.Node, resolution: str, p: int, m: int, batch: bool) -> ad.Node:
    lead = (logits.shape[0],) if batch else ()
    if resolution == "coarse":
        return ad.softmax(ad.reshape(logits, lead + (p,)))
    if resolution == "medium":
        return ad.softmax(ad.reshape(logits, lead + (m, p)))
    s = ad.softmax(ad.reshape(logits, lead + (m, p * m)))
    return ad.reshape(s, lead + (m, p, m))


def _diagonal_logit_boost(p: int, m: int) -> np.ndarray:
    boost = np.zeros((m, p, m))
    for t in range(m):
        boost[t, :, t] = FINE_DIAGONAL_BOOST
    return boost.reshape(m, p * m)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class AggregatorConfig:
    """How to fit an ensemble.

    ``margin`` is ``("constant", delta)`` or ``("adaptive", delta0)``;
    ``iso`` is ``(stage, operator)`` with stage in ``none/post/end_to_end``
    and operator in ``sort/pava/mms``.
    """

    resolution: str = "fine"
    locality: str = "local"
    penalty: float = 1.0
    margin: tuple[str, float] = ("adaptive", 1e-2)
    iso: tuple[str, str] = ("post", "sort")
    hidden: tuple[int, ...] = (64, 64)
    dropout: float = 0.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, weight_decay=1e-5))

    def __post_init__(self):
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}")
        if self.locality not in LOCALITIES:
            raise ValueError(f"locality must be one of {LOCALITIES}")
        if self.penalty < 0:
            raise ValueError("crossing penalty weight must be nonnegative")
        if self.margin[0] not in ("constant", "adaptive") or self.margin[1] < 0:
            raise ValueError("margin must be ('constant'|'adaptive', nonnegative value)")
        stage, op = self.iso
        if stage not in ISO_STAGES or op not in ("sort", "pava", "mms"):
            raise ValueError(f"bad isotonization mode {self.iso}")

    @property
    def name(self) -> str:
        return f"{self.locality}-{self.resolution}"


DQA = AggregatorConfig()


# -- fitted ensembles ----------------------------------------------------------


@dataclass
class Ensemble:
    """Full-data base models plus fitted weights and post-processing.

    ``combine(base_preds, X)`` works on precomputed base predictions; ``predict``
    runs the base models first.
    """

    grid: QuantileGrid
    weights: WeightSpec | None
    iso: tuple[str, str]
    base_models: list[QuantileModel] = field(default_factory=list)
    margins: np.ndarray | None = None
    kind: str = "weighted"
    qra: dict[str, np.ndarray] | None = None
    y_stats: tuple[float, float] = (0.0, 1.0)
    name: str = ""

    def raw_combine(self, base_preds, X=None) -> np.ndarray:
        P = np.asarray(base_preds, dtype=float)
        if self.kind == "average":
            return P.mean(axis=1)
        if self.kind == "median":
            return np.median(P, axis=1)
        if self.kind == "qra":
            return np.einsum("tj,bjt->bt", self.qra["A"], P) + self.qra["c"]
        return apply_weights(self.weights, P, X)

    def combine(self, base_preds, X=None) -> np.ndarray:
        out = self.raw_combine(base_preds, X)
        stage, op = self.iso
        if stage != "none":
            out = isotonize(out, op, self.grid.anchor_index).values
        return out

    def base_predict(self, X) -> np.ndarray:
        if not self.base_models:
            raise RuntimeError("ensemble has no fitted base models")
        return np.stack([m.predict(X) for m in self.base_models], axis=1)

    def predict(self, X) -> np.ndarray:
        return self.combine(self.base_predict(X), X)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_list(),
            "kind": self.kind,
            "name": self.name,
            "iso": list(self.iso),
            "weights": None if self.weights is None else self.weights.to_dict(),
            "margins": None if self.margins is None else self.margins.tolist(),
            "qra": None if self.qra is None else {k: v.tolist() for k, v in self.qra.items()},
            "y_stats": list(self.y_stats),
            "base_models": [m.to_dict() for m in self.base_models],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        return cls(
            grid=QuantileGrid(d["grid"]),
            weights=None if d["weights"] is None else WeightSpec.from_dict(d["weights"]),
            iso=tuple(d["iso"]),
            base_models=[QuantileModel.from_dict(b) for b in d["base_models"]],
            margins=None if d["margins"] is None else np.asarray(d["margins"], dtype=float),
            kind=d["kind"],
            qra=None if d["qra"] is None else {k: np.asarray(v, dtype=float) for k, v in d["qra"].items()},
            y_stats=tuple(d["y_stats"]),
            name=d.get("name", ""),
        )


def _margins_for(config: AggregatorConfig, cube: BasePredCube, y, grid) -> np.ndarray:
    scheme, value = config.margin
    if scheme == "constant":
        return constant_margins(grid, value)
    return adaptive_margins(pilot_residuals(cube, y, grid), grid, value)


def _weights_node(prm, config: AggregatorConfig, p: int, m: int, Z, gate, rng) -> ad.Node:
    if config.locality == "local":
        logits = forward(gate, prm, Z, rng)
        return _logits_to_weights(logits, config.resolution, p, m, batch=True)
    return _logits_to_weights(prm["phi"], config.resolution, p, m, batch=False)


def ensemble_loss(prm, config: AggregatorConfig, grid: QuantileGrid, P, u, margins,
                  Z=None, gate: MlpSpec | None = None, rng=None) -> ad.Node:
    """Training objective on one batch: pinball of the (optionally isotonized)
    combination plus ``config.penalty`` times the crossing hinge.

    The hinge sees the combination before the isotonic layer. ``prm`` maps names
    to nodes: ``phi`` (global logits) or the gating network's weights.
    """
    p, m = P.shape[1], grid.m
    w = _weights_node(prm, config, p, m, Z, gate, rng)
    g = ad.einsum(_EINSUM[(config.locality, config.resolution)], w, P)
    stage, op = config.iso
    out_q = ad.isotonic_layer(g, op, grid.anchor_index) if stage == "end_to_end" else g
    total = ad.pinball(out_q, u, grid.levels)
    if config.penalty > 0:
        total = total + config.penalty * ad.crossing_hinge(g, margins)
    return total


def _fit_weights(
    cube: BasePredCube,
    X,
    y,
    grid: QuantileGrid,
    config: AggregatorConfig,
    val: tuple[np.ndarray, np.ndarray, np.ndarray],
    seed: int,
    margins: np.ndarray,
) -> WeightSpec:
    """Shared SGD loop for global and local weights on standardized responses."""
    p, m = cube.p, grid.m
    y = np.asarray(y, dtype=float)
    loc, scale = float(y.mean()), float(y.std()) or 1.0
    P = (cube.preds - loc) / scale
    u = (y - loc) / scale
    Xv, Pv, yv = val
    Pv = (np.asarray(Pv, dtype=float) - loc) / scale
    uv = (np.asarray(yv, dtype=float) - loc) / scale
    margins_z = margins / scale
    stage, op = config.iso
    anchor = grid.anchor_index
    local = config.locality == "local"
    spec_key = (config.locality, config.resolution)

    if local:
        scaler = Scaler.fit(X, warn=False)
        Z = scaler.transform(X)
        Zv = scaler.transform(Xv)
        n_out = int(np.prod(_logit_shape(config.resolution, p, m)))
        gate = MlpSpec((Z.shape[1], *config.hidden, n_out), config.dropout, seed)
        params = init_params(gate)
        last = gate.n_layers - 1
        params[f"W{last}"] *= 0.1
        params[f"b{last}"] = np.zeros(n_out)
        if config.resolution == "fine":
            params[f"b{last}"] = _diagonal_logit_boost(p, m).ravel()
    else:
        scaler, gate, Z, Zv = None, None, None, None
        params = {"phi": np.zeros(_logit_shape(config.resolution, p, m))}
        if config.resolution == "fine":
            params["phi"] = _diagonal_logit_boost(p, m)

    def loss(prm, idx, rng):
        return ensemble_loss(prm, config, grid, P[idx], u[idx], margins_z,
                             Z[idx] if local else None, gate, rng)

    def val_score(prm):
        leaves = {k: ad.leaf(v) for k, v in prm.items()}
        w = _weights_node(leaves, config, p, m, Zv, gate, None).value
        q = np.einsum(_EINSUM[spec_key], w, Pv)
        if stage != "none":
            q = isotonize(q, op, anchor).values
        return mean_wis(grid, q, uv)

    res = train_until_stop(params, loss, len(u), val_score, replace(config.train, seed=seed))
    if local:
        return WeightSpec(config.resolution, "local", p, m, gate=gate, gate_params=res.params, scaler=scaler)
    leaves = {"phi": ad.leaf(res.params["phi"])}
    w = _weights_node(leaves, config, p, m, None, None, None).value
    return WeightSpec(config.resolution, "global", p, m, weights=w)


def fit_global(cube: BasePredCube, y, grid, config: AggregatorConfig, val, seed: int = 0,
               margins: np.ndarray | None = None) -> WeightSpec:
    """Softmax-parametrized global weights trained on pinball + penalty.

    ``val = (X_val, base_preds_val, y_val)`` drives early stopping.
    """
    cube.check()
    config = replace(config, locality="global")
    if margins is None:
        margins = _margins_for(config, cube, y, grid)
    return _fit_weights(cube, None, y, grid, config, val, seed, margins)


def fit_local(cube: BasePredCube, X, y, grid, config: AggregatorConfig, val, seed: int = 0,
              margins: np.ndarray | None = None) -> WeightSpec:
    """Gating-network weights ``softmax(W_tau f_theta(x))`` trained jointly."""
    cube.check()
    config = replace(config, locality="local")
    if margins is None:
        margins = _margins_for(config, cube, y, grid)
    return _fit_weights(cube, X, y, grid, config, val, seed, margins)


def fit_ensemble(
    cube: BasePredCube,
    X,
    y,
    grid: QuantileGrid,
    config: AggregatorConfig,
    val,
    base_models: Sequence[QuantileModel] = (),
    seed: int = 0,
) -> Ensemble:
    """Fit weights per ``config`` and bundle them with the full-data base models."""
    margins = _margins_for(config, cube, y, grid)
    if config.locality == "local":
        w = fit_local(cube, X, y, grid, config, val, seed, margins)
    else:
        w = fit_global(cube, y, grid, config, val, seed, margins)
    y = np.asarray(y, dtype=float)
    return Ensemble(grid, w, config.iso, list(base_models), margins,
                    y_stats=(float(y.mean()), float(y.std())), name=config.name)


# -- baselines -----------------------------------------------------------------


def baseline(
    kind: str,
    cube: BasePredCube,
    y,
    grid: QuantileGrid,
    base_models: Sequence[QuantileModel] = (),
    val=None,
    train: TrainConfig | None = None,
    seed: int = 0,
) -> Ensemble:
    """Average, Median, or QRA (per-level linear quantile regression on base outputs).

    Every baseline is post-sorted at prediction time.
    """
    kind = kind.lower()
    if kind in ("average", "median"):
        return Ensemble(grid, None, ("post", "sort"), list(base_models), kind=kind, name=kind)
    if kind != "qra":
        raise ValueError(f"unknown baseline {kind!r}")
    y = np.asarray(y, dtype=float)
    loc, scale = float(y.mean()), float(y.std()) or 1.0
    P = (cube.preds - loc) / scale
    u = (y - loc) / scale
    p, m = cube.p, grid.m
    params = {"A": np.full((m, p), 1.0 / p), "c": np.zeros(m)}

    def loss(prm, idx, rng):
        q = ad.add(ad.einsum("tj,bjt->bt", prm["A"], P[idx]), prm["c"])
        return ad.pinball(q, u[idx], grid.levels)

    if val is None:
        def val_score(prm):
            q = np.einsum("tj,bjt->bt", prm["A"], P) + prm["c"]
            return mean_wis(grid, q, u)
    else:
        Pv = (np.asarray(val[1], dtype=float) - loc) / scale
        uv = (np.asarray(val[2], dtype=float) - loc) / scale

        def val_score(prm):
            q = np.einsum("tj,bjt->bt", prm["A"], Pv) + prm["c"]
            return mean_wis(grid, np.sort(q, axis=1), uv)

    cfg = train or TrainConfig(learning_rate=1e-2, weight_decay=0.0, max_epochs=200)
    res = train_until_stop(params, loss, len(u), val_score, replace(cfg, seed=seed))
    # undo the standardization: q = A·P + loc·(1 - sum_j A) + scale·c
    A = res.params["A"]
    c = scale * res.params["c"] + loc * (1.0 - A.sum(axis=1))
    return Ensemble(grid, None, ("post", "sort"), list(base_models), kind="qra",
                    qra={"A": A, "c": c}, name="qra")
