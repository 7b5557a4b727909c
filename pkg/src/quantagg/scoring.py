"""Proper scoring rules and interval metrics for quantile forecasts.

Quantile predictions are plain arrays whose last axis is aligned with a
:class:`~quantagg.grid.QuantileGrid`; a single prediction has shape ``(m,)``
and a batch ``(n, m)``. All functions are pure.
"""
from __future__ import annotations

import numpy as np

from .grid import GridError, QuantileGrid


def _check_tau(tau):
    tau = np.asarray(tau, dtype=float)
    if np.any((tau <= 0) | (tau >= 1)) or not np.all(np.isfinite(tau)):
        raise ValueError("tau must lie in the open interval (0, 1)")
    return tau


def _check_preds(grid: QuantileGrid, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 0 or q.shape[-1] != grid.m:
        raise GridError(
            f"prediction has {q.shape[-1] if q.ndim else 0} levels, grid has {grid.m}"
        )
    return q


def pinball(tau, y, q):
    """Tilted absolute loss: ``tau*(y-q)`` above ``q``, ``(1-tau)*(q-y)`` below."""
    tau = _check_tau(tau)
    r = np.asarray(y, dtype=float) - np.asarray(q, dtype=float)
    out = np.where(r >= 0, tau * r, (tau - 1.0) * r)
    return float(out) if out.ndim == 0 else out


def pinball_sum(grid: QuantileGrid, y, q):
    """Pinball loss summed over every level of ``grid``.

    ``q`` has shape ``(..., m)`` and ``y`` broadcasts against ``q[..., 0]``.
    """
    q = _check_preds(grid, q)
    r = np.asarray(y, dtype=float)[..., None] - q
    tau = grid.levels
    out = np.where(r >= 0, tau * r, (tau - 1.0) * r).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def wis(grid: QuantileGrid, q, y):
    """Weighted interval score in its interval form.

    Sums ``alpha*(u-l) + 2*dist(y, [l, u])`` over the central intervals of the
    grid. Only defined for grids without the median level; elsewhere use
    :func:`wis_from_pinball`, which is the canonical definition.
    """
    q = _check_preds(grid, q)
    if grid.has_median:
        raise GridError("interval-form WIS is only exposed for grids without 0.5")
    y = np.asarray(y, dtype=float)
    half = grid.m // 2
    lower = q[..., :half]
    upper = q[..., ::-1][..., :half]
    alphas = grid.alphas
    yy = y[..., None]
    dist = np.maximum(lower - yy, 0.0) + np.maximum(yy - upper, 0.0)
    out = (alphas * (upper - lower) + 2.0 * dist).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def wis_from_pinball(grid: QuantileGrid, q, y):
    """Canonical WIS: twice the summed pinball loss (valid with or without 0.5)."""
    out = 2.0 * np.asarray(pinball_sum(grid, y, q))
    return float(out) if out.ndim == 0 else out


def mean_wis(grid: QuantileGrid, q, y) -> float:
    """Average canonical WIS over a batch of predictions."""
    return float(np.mean(wis_from_pinball(grid, q, y)))


def crps_discrete(grid: QuantileGrid, q, y):
    """Riemann approximation of CRPS from quantiles on an evenly spaced grid."""
    if not grid.is_even():
        raise GridError("discretized CRPS requires an evenly spaced grid")
    out = (2.0 / grid.m) * np.asarray(pinball_sum(grid, y, q))
    return float(out) if out.ndim == 0 else out


def gaussian_crps(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``y``."""
    from scipy.stats import norm

    z = (np.asarray(y, dtype=float) - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi))


def pve(median_preds, y_test) -> float:
    """Proportion of variance in ``y_test`` explained by the median predictions."""
    m = np.asarray(median_preds, dtype=float).ravel()
    y = np.asarray(y_test, dtype=float).ravel()
    if m.shape != y.shape:
        raise ValueError("median_preds and y_test must have equal length")
    if y.size < 2:
        raise ValueError("need at least two test points")
    denom = np.sum((y - y.mean()) ** 2)
    if denom == 0:
        raise ZeroDivisionError("PVE is undefined for a constant response")
    return float(1.0 - np.sum((y - m) ** 2) / denom)


def coverage_and_length(grid: QuantileGrid, preds, y, alpha: float) -> tuple[float, float]:
    """Empirical coverage and mean width of the central ``1 - alpha`` interval."""
    preds = _check_preds(grid, np.atleast_2d(preds))
    lo, hi = grid.alpha_indices(alpha)
    y = np.asarray(y, dtype=float).ravel()
    lower, upper = preds[:, lo], preds[:, hi]
    covered = (lower <= y) & (y <= upper)
    return float(np.mean(covered)), float(np.mean(upper - lower))
