"""Base conditional quantile regressors.

Every model follows the same small interface::

    model = SomeModel(**hyper).fit(X, y, grid, val=(X_val, y_val), seed=0)
    q = model.predict(X_new)          # shape (n, grid.m)

Neural models use ``val`` for early stopping; without it they hold out a
seeded 10% of the training rows.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, ClassVar

import numpy as np
from scipy.stats import norm

from .empirical import empirical_quantile
from .grid import QuantileGrid
from .neuralnet import MlpSpec, TrainConfig, forward, init_params, train_until_stop
from .neuralnet import autodiff as ad
from .neuralnet.checkpoint import params_from_dict, params_to_dict
from .scoring import mean_wis

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


class DegenerateDesignWarning(UserWarning):
    pass


@dataclass
class Scaler:
    """Per-column location/scale with zero-variance columns dropped."""

    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray

    @classmethod
    def fit(cls, X, warn: bool = True) -> "Scaler":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        keep = sd > 1e-12
        if warn and not np.all(keep):
            warnings.warn(
                f"dropping zero-variance columns {np.flatnonzero(~keep).tolist()}",
                DegenerateDesignWarning,
                stacklevel=3,
            )
        return cls(mean, np.where(keep, sd, 1.0), keep)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return ((X - self.mean) / self.scale)[:, self.keep]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "keep": self.keep.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(np.asarray(d["mean"], float), np.asarray(d["scale"], float), np.asarray(d["keep"], bool))


def _target_stats(y) -> tuple[float, float]:
    y = np.asarray(y, dtype=float)
    sd = float(y.std())
    return float(y.mean()), sd if sd > 1e-12 else 1.0


def _split_val(X, y, val, seed):
    if val is not None:
        return X, y, val[0], val[1]
    rng = np.random.default_rng(seed + 7919)
    n = len(y)
    perm = rng.permutation(n)
    n_val = max(1, n // 10) if n > 1 else 0
    vi, ti = perm[:n_val], perm[n_val:]
    if ti.size == 0:
        ti = vi
    return X[ti], y[ti], X[vi], y[vi]


class QuantileModel:
    """Shared plumbing: standardization, checkpointing, grid bookkeeping."""

    kind: ClassVar[str] = ""

    def __init__(self):
        self.grid: QuantileGrid | None = None
        self.scaler: Scaler | None = None
        self.y_loc = 0.0
        self.y_scale = 1.0

    def _prepare(self, X, y, grid):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, d) with one response per row")
        self.grid = grid
        self.scaler = Scaler.fit(X)
        self.y_loc, self.y_scale = _target_stats(y)
        return X, y

    def _z(self, X):
        if self.scaler is None:
            raise RuntimeError(f"{type(self).__name__} is not fitted")
        return self.scaler.transform(X)

    def hyper(self) -> dict[str, Any]:
        return {}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hyper": self.hyper(),
            "grid": self.grid.to_list(),
            "scaler": self.scaler.to_dict(),
            "y_loc": self.y_loc,
            "y_scale": self.y_scale,
            "state": self._state(),
        }

    def _state(self) -> dict:
        raise NotImplementedError

    def _load_state(self, state: dict) -> None:
        raise NotImplementedError

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileModel":
        model = MODEL_KINDS[d["kind"]](**d["hyper"])
        model.grid = QuantileGrid(d["grid"])
        model.scaler = Scaler.from_dict(d["scaler"])
        model.y_loc, model.y_scale = float(d["y_loc"]), float(d["y_scale"])
        model._load_state(d["state"])
        return model


class _NeuralQuantileModel(QuantileModel):
    """Models trained by minibatch Adam with validation-WIS early stopping."""

    def __init__(self, train: TrainConfig | None = None):
        super().__init__()
        self.train_config = train or TrainConfig()
        self.params: dict[str, np.ndarray] | None = None
        self.best_epoch = 0
        self.constant = False

    def _fit_params(self, X, y, grid, val, seed, params, loss_fn):
        self.constant = bool(np.ptp(y) == 0)
        if self.constant:
            # nothing to learn, and the pinball kink at zero residual makes SGD dither
            self.params = params
            return self
        Xt, yt, Xv, yv = _split_val(X, y, val, seed)
        Zt = self._z(Xt)
        ut = (yt - self.y_loc) / self.y_scale
        Zv = self._z(Xv)
        uv = (yv - self.y_loc) / self.y_scale

        def batch_loss(p, idx, rng):
            return loss_fn(p, Zt[idx], ut[idx], rng)

        def val_score(p):
            return mean_wis(grid, self._raw_predict(p, Zv), uv)

        cfg = replace(self.train_config, seed=seed)
        res = train_until_stop(params, batch_loss, len(ut), val_score, cfg)
        self.params = res.params
        self.best_epoch = res.best_epoch
        return self

    def _raw_predict(self, params, Z) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        if self.params is None:
            raise RuntimeError(f"{type(self).__name__} is not fitted")
        if self.constant:
            return np.full((np.shape(X)[0], self.grid.m), self.y_loc)
        return self.y_loc + self.y_scale * self._finalize(self._raw_predict(self.params, self._z(X)))

    def _finalize(self, q):
        return q

    def _state(self):
        return {"params": params_to_dict(self.params), "best_epoch": self.best_epoch, "constant": self.constant}

    def _load_state(self, state):
        self.params, _ = params_from_dict(state["params"])
        self.best_epoch = int(state.get("best_epoch", 0))
        self.constant = bool(state.get("constant", False))

    def hyper(self):
        t = self.train_config
        return {"train": {"learning_rate": t.learning_rate, "weight_decay": t.weight_decay,
                          "batch_size": t.batch_size, "max_epochs": t.max_epochs,
                          "early_stop_patience_updates": t.early_stop_patience_updates}}


def _train_from(h: dict | TrainConfig | None) -> TrainConfig | None:
    if h is None or isinstance(h, TrainConfig):
        return h
    return TrainConfig(**h)


class LinearPinball(_NeuralQuantileModel):
    """One linear head per level, trained jointly on the summed pinball loss."""

    kind = "linear_pinball"

    def __init__(self, l2: float = 0.0, train: TrainConfig | dict | None = None):
        super().__init__(_train_from(train) or TrainConfig(learning_rate=1e-2, weight_decay=0.0, max_epochs=200))
        self.l2 = float(l2)

    def hyper(self):
        return {"l2": self.l2, **super().hyper()}

    def fit(self, X, y, grid: QuantileGrid, val=None, seed: int = 0) -> "LinearPinball":
        X, y = self._prepare(X, y, grid)
        Z = self._z(X)
        d = Z.shape[1]
        if len(y) < d + 1:
            raise ValueError("need at least d + 1 rows")
        u = (y - self.y_loc) / self.y_scale
        params = {"W": np.zeros((d, grid.m)), "b": empirical_quantile(u, grid.levels)}

        def loss(p, Zb, ub, rng):
            out = ad.pinball(ad.affine(Zb, p["W"], p["b"]), ub, grid.levels)
            if self.l2 > 0:
                out = out + self.l2 * ad.total(ad.square(p["W"]))
            return out

        return self._fit_params(X, y, grid, val, seed, params, loss)

    def _raw_predict(self, params, Z):
        return Z @ params["W"] + params["b"]


class ConditionalGaussian(_NeuralQuantileModel):
    """Gaussian likelihood model: quantiles ``mu(x) + sigma(x) * z_tau``.

    ``hidden=()`` gives a linear mean; otherwise the mean is an ELU network.
    ``log_sigma`` is ``"constant"`` or ``"linear"`` in the features.
    """

    kind = "conditional_gaussian"

    def __init__(self, hidden: tuple[int, ...] = (), log_sigma: str = "linear",
                 dropout: float = 0.0, train: TrainConfig | dict | None = None):
        super().__init__(_train_from(train) or TrainConfig(learning_rate=1e-2, weight_decay=0.0, max_epochs=200))
        if log_sigma not in ("constant", "linear"):
            raise ValueError("log_sigma must be 'constant' or 'linear'")
        self.hidden = tuple(int(h) for h in hidden)
        self.log_sigma = log_sigma
        self.dropout = float(dropout)
        self.d = 0

    def hyper(self):
        return {"hidden": list(self.hidden), "log_sigma": self.log_sigma,
                "dropout": self.dropout, **super().hyper()}

    def _spec(self, seed=0):
        return MlpSpec((self.d, *self.hidden, 1), self.dropout, seed) if self.hidden else None

    def _mu_sigma(self, p, Z, rng=None):
        spec = self._spec()
        if spec is None:
            mu = ad.affine(Z, p["Wm"], p["bm"])
        else:
            mu = forward(spec, p, Z, rng, prefix="m")
        if self.log_sigma == "linear":
            ls = ad.affine(Z, p["Ws"], p["bs"])
        else:
            ls = ad.add(np.zeros((Z.shape[0], 1)), p["bs"])
        return mu, ls

    def fit(self, X, y, grid: QuantileGrid, val=None, seed: int = 0) -> "ConditionalGaussian":
        X, y = self._prepare(X, y, grid)
        Z = self._z(X)
        self.d = Z.shape[1]
        spec = self._spec(seed)
        params = init_params(spec, prefix="m") if spec else {"Wm": np.zeros((self.d, 1)), "bm": np.zeros(1)}
        params["bs"] = np.zeros(1)
        if self.log_sigma == "linear":
            params["Ws"] = np.zeros((self.d, 1))

        def loss(p, Zb, ub, rng):
            mu, ls = self._mu_sigma(p, Zb, rng)
            z = ad.mul(ad.sub(ub[:, None], mu), ad.exp(ad.mul(ls, -1.0)))
            return ad.mean(ad.add(ls, ad.mul(ad.square(z), 0.5)))

        return self._fit_params(X, y, grid, val, seed, params, loss)

    def mu_sigma(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation in response units."""
        Z = self._z(X)
        leaves = {k: ad.leaf(v) for k, v in self.params.items()}
        mu, ls = self._mu_sigma(leaves, Z)
        sigma = np.exp(ls.value[:, 0])
        if np.any(sigma < SIGMA_FLOOR):
            warnings.warn("predicted sigma underflowed; flooring at 1e-6", RuntimeWarning, stacklevel=2)
            sigma = np.maximum(sigma, SIGMA_FLOOR)
        return self.y_loc + self.y_scale * mu.value[:, 0], self.y_scale * sigma

    def _raw_predict(self, params, Z):
        leaves = {k: ad.leaf(v) for k, v in params.items()}
        mu, ls = self._mu_sigma(leaves, Z)
        sigma = np.maximum(np.exp(ls.value), SIGMA_FLOOR)
        return mu.value + sigma * norm.ppf(self.grid.levels)

    def _state(self):
        return {**super()._state(), "d": self.d}

    def _load_state(self, state):
        super()._load_state(state)
        self.d = int(state["d"])


class KnnQuantile(QuantileModel):
    """Empirical quantiles of the ``k`` nearest training responses.

    Distances are Euclidean on standardized features.
    """

    kind = "knn_quantile"

    def __init__(self, k: int = 50):
        super().__init__()
        self.k = int(k)
        self.Z: np.ndarray | None = None
        self.y: np.ndarray | None = None

    def hyper(self):
        return {"k": self.k}

    def fit(self, X, y, grid: QuantileGrid, val=None, seed: int = 0) -> "KnnQuantile":
        X, y = self._prepare(X, y, grid)
        if self.k > len(y) or self.k < 1:
            raise ValueError(f"k={self.k} must lie in [1, n={len(y)}]")
        self.Z = self._z(X)
        self.y = y.copy()
        return self

    def predict(self, X, chunk: int = 512) -> np.ndarray:
        if self.Z is None:
            raise RuntimeError("KnnQuantile is not fitted")
        Zq = self._z(X)
        n = len(self.y)
        out = np.empty((Zq.shape[0], self.grid.m))
        sq_train = np.sum(self.Z**2, axis=1)
        for s in range(0, Zq.shape[0], chunk):
            zq = Zq[s : s + chunk]
            d2 = np.sum(zq**2, axis=1)[:, None] - 2 * zq @ self.Z.T + sq_train[None, :]
            if self.k == n:
                nb = np.broadcast_to(self.y, d2.shape)
            else:
                idx = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
                nb = self.y[idx]
            out[s : s + chunk] = empirical_quantile(nb, self.grid.levels)
        return out

    def _state(self):
        return {"Z": self.Z.tolist(), "y": self.y.tolist()}

    def _load_state(self, state):
        self.Z = np.asarray(state["Z"], dtype=float)
        self.y = np.asarray(state["y"], dtype=float)


class DQR(_NeuralQuantileModel):
    """ELU network with an unconstrained width-m head.

    Trained on the summed pinball loss plus ``penalty * crossing_hinge`` with a
    constant ``margin``; predictions are sorted across levels.
    """

    kind = "dqr"

    def __init__(self, hidden: tuple[int, ...] = (64, 64), dropout: float = 0.0,
                 penalty: float = 1.0, margin: float = 0.0,
                 train: TrainConfig | dict | None = None):
        super().__init__(_train_from(train))
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = float(dropout)
        self.penalty = float(penalty)
        self.margin = float(margin)
        self.d = 0

    def hyper(self):
        return {"hidden": list(self.hidden), "dropout": self.dropout, "penalty": self.penalty,
                "margin": self.margin, **super().hyper()}

    def _spec(self, seed=0):
        return MlpSpec((self.d, *self.hidden, self.grid.m), self.dropout, seed)

    def fit(self, X, y, grid: QuantileGrid, val=None, seed: int = 0) -> "DQR":
        X, y = self._prepare(X, y, grid)
        self.d = self._z(X[:1]).shape[1]
        spec = self._spec(seed)
        params = init_params(spec)
        u = (y - self.y_loc) / self.y_scale
        params[f"b{spec.n_layers - 1}"] = empirical_quantile(u, grid.levels)
        margins = np.triu(np.full((grid.m, grid.m), self.margin / self.y_scale), 1)

        def loss(p, Zb, ub, rng):
            q = forward(spec, p, Zb, rng)
            out = ad.pinball(q, ub, grid.levels)
            if self.penalty > 0:
                out = out + self.penalty * ad.crossing_hinge(q, margins)
            return out

        return self._fit_params(X, y, grid, val, seed, params, loss)

    def _raw_predict(self, params, Z):
        leaves = {k: ad.leaf(v) for k, v in params.items()}
        return forward(self._spec(), leaves, Z).value

    def _finalize(self, q):
        return np.sort(q, axis=-1)

    def _state(self):
        return {**super()._state(), "d": self.d}

    def _load_state(self, state):
        super()._load_state(state)
        self.d = int(state["d"])


MODEL_KINDS: dict[str, type[QuantileModel]] = {
    cls.kind: cls for cls in (LinearPinball, ConditionalGaussian, KnnQuantile, DQR)
}


@dataclass(frozen=True)
class BaseModelKind:
    """A base-model family plus one hyperparameter setting."""

    name: str
    hyper: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.name not in MODEL_KINDS:
            raise ValueError(f"unknown base model {self.name!r}; known: {sorted(MODEL_KINDS)}")

    def build(self) -> QuantileModel:
        return MODEL_KINDS[self.name](**self.hyper)

    def fit(self, X, y, grid, val=None, seed: int = 0) -> QuantileModel:
        return self.build().fit(X, y, grid, val=val, seed=seed)

    @property
    def label(self) -> str:
        if not self.hyper:
            return self.name
        parts = ",".join(f"{k}={v}" for k, v in sorted(self.hyper.items()) if k != "train")
        return f"{self.name}({parts})"


def fit_linear_pinball(X, y, grid, config: dict | None = None, val=None, seed=0):
    return LinearPinball(**(config or {})).fit(X, y, grid, val=val, seed=seed)


def fit_conditional_gaussian(X, y, grid, config: dict | None = None, val=None, seed=0):
    return ConditionalGaussian(**(config or {})).fit(X, y, grid, val=val, seed=seed)


def fit_knn_quantile(X, y, grid, k: int, seed=0):
    return KnnQuantile(k).fit(X, y, grid, seed=seed)


def fit_dqr(X, y, grid, spec: dict | None = None, val=None, seed=0):
    return DQR(**(spec or {})).fit(X, y, grid, val=val, seed=seed)
