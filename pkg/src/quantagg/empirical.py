"""Empirical quantiles under the lower order-statistic convention."""
from __future__ import annotations

import numpy as np


def empirical_quantile(values, taus, axis: int = -1) -> np.ndarray:
    """The ``ceil(tau * n)``-th order statistic of ``values`` for each ``tau``.

    ``taus`` may be a scalar or a 1-d array; the result replaces ``axis`` by
    the level axis (placed last).
    """
    v = np.sort(np.asarray(values, dtype=float), axis=axis)
    v = np.moveaxis(v, axis, -1)
    n = v.shape[-1]
    if n == 0:
        raise ValueError("empirical quantile of an empty set")
    taus = np.asarray(taus, dtype=float)
    idx = np.clip(np.ceil(taus * n - 1e-12).astype(int) - 1, 0, n - 1)
    return v[..., idx]
