"""Synthetic regression problems with known conditional distributions.

Each generator returns ``(X, y, truth)`` where ``truth(X, taus)`` gives the
exact conditional quantiles, so Bayes-optimal scores can be computed.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.stats import norm, t as student_t

Truth = Callable[[np.ndarray, np.ndarray], np.ndarray]


def linear_gaussian(n: int, d: int = 3, noise: float = 1.0, seed: int = 0):
    """``y = x @ beta + noise * N(0, 1)`` with ``beta = (1, -0.5, 0.25, ...)``."""
    rng = np.random.default_rng(seed)
    beta = np.array([(-0.5) ** j for j in range(d)])
    X = rng.normal(size=(n, d))
    y = X @ beta + noise * rng.normal(size=n)

    def truth(Xq, taus):
        return (Xq @ beta)[:, None] + noise * norm.ppf(np.asarray(taus))[None, :]

    return X, y, truth


def heteroskedastic(n: int, d: int = 2, seed: int = 0):
    """``y = sin(2 x1) + (0.2 + 0.8 |x1|) * N(0, 1)``; extra columns are noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, d))
    scale = 0.2 + 0.8 * np.abs(X[:, 0])
    y = np.sin(2 * X[:, 0]) + scale * rng.normal(size=n)

    def truth(Xq, taus):
        s = 0.2 + 0.8 * np.abs(Xq[:, 0])
        return np.sin(2 * Xq[:, 0])[:, None] + s[:, None] * norm.ppf(np.asarray(taus))[None, :]

    return X, y, truth


def two_regime(n: int, seed: int = 0):
    """Two halves of feature space with different structure.

    Features ``x ~ U(-1, 1)^3``. Where ``x1 < 0`` the response is linear and
    nearly noiseless (``3 x2 + 0.3 N(0,1)``); where ``x1 >= 0`` it is
    ``3 x2 + 2 cos(pi x3)`` plus skewed noise ``0.5 * (Exp(1) - 1)``. Linear
    learners are right on the first half, local learners on the second.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 3))
    a = X[:, 0] < 0
    y = 3 * X[:, 1] + np.where(
        a, 0.3 * rng.normal(size=n), 2 * np.cos(np.pi * X[:, 2]) + 0.5 * (rng.exponential(size=n) - 1)
    )

    def truth(Xq, taus):
        taus = np.asarray(taus)[None, :]
        aq = (Xq[:, 0] < 0)[:, None]
        base = 3 * Xq[:, 1][:, None]
        qa = 0.3 * norm.ppf(taus)
        qb = 2 * np.cos(np.pi * Xq[:, 2])[:, None] + 0.5 * (-np.log1p(-taus) - 1)
        return base + np.where(aq, qa, qb)

    return X, y, truth


def heavy_tailed(n: int, d: int = 2, df: float = 3.0, seed: int = 0):
    """``y = x1 - x2 + t_df`` noise."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = X[:, 0] - X[:, 1] + rng.standard_t(df, size=n)

    def truth(Xq, taus):
        return (Xq[:, 0] - Xq[:, 1])[:, None] + student_t.ppf(np.asarray(taus), df)[None, :]

    return X, y, truth


def bone_mineral_like(n: int, seed: int = 0):
    """One feature, a bump-shaped mean and spread that grows then shrinks."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(9, 25, size=n)
    mean = 0.06 * np.exp(-((x - 13) ** 2) / 8) - 0.01
    sd = 0.01 + 0.03 * np.exp(-((x - 14) ** 2) / 20)
    y = mean + sd * rng.normal(size=n)

    def truth(Xq, taus):
        xq = Xq[:, 0]
        m = 0.06 * np.exp(-((xq - 13) ** 2) / 8) - 0.01
        s = 0.01 + 0.03 * np.exp(-((xq - 14) ** 2) / 20)
        return m[:, None] + s[:, None] * norm.ppf(np.asarray(taus))[None, :]

    return x[:, None], y, truth


def independent_noise(n: int, d: int = 2, seed: int = 0):
    """Response independent of the features: ``y ~ N(0, 1)``."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)

    def truth(Xq, taus):
        return np.broadcast_to(norm.ppf(np.asarray(taus))[None, :], (len(Xq), len(taus))).copy()

    return X, y, truth


GENERATORS = {
    "linear_gaussian": linear_gaussian,
    "heteroskedastic": heteroskedastic,
    "two_regime": two_regime,
    "heavy_tailed": heavy_tailed,
    "bone_mineral_like": bone_mineral_like,
    "independent_noise": independent_noise,
}
