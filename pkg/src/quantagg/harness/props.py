"""Quick randomized property checks behind ``quantagg proptest``."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from ..distlab import gaussian, moment, probability_average, quantile_average
from ..grid import QuantileGrid
from ..isotonic import isotonize, pava
from ..scoring import crps_discrete, gaussian_crps, pinball_sum, wis, wis_from_pinball


@dataclass
class PropResult:
    name: str
    passed: bool
    detail: str


def _random_grid(rng, with_median: bool) -> QuantileGrid:
    k = int(rng.integers(1, 6))
    lower = np.sort(rng.uniform(0.01, 0.49, size=k))
    levels = np.concatenate([lower, [0.5] if with_median else [], 1 - lower[::-1]])
    return QuantileGrid(levels)


def check_wis_identity(n: int, rng) -> PropResult:
    worst = 0.0
    for _ in range(n):
        g = _random_grid(rng, with_median=False)
        q = np.sort(rng.normal(size=g.m))
        y = rng.normal()
        worst = max(worst, abs(wis(g, q, y) - wis_from_pinball(g, q, y)))
    return PropResult("wis == 2 * pinball_sum", worst <= 1e-12, f"max abs diff {worst:.2e}")


def check_crps(rng) -> PropResult:
    g = QuantileGrid.even(999)
    from scipy.stats import norm

    q = norm.ppf(g.levels)
    # the 1e-3 tolerance holds near the center; the error grows with |y|
    ys = np.concatenate([[0.0], rng.uniform(-1, 1, size=20)])
    err = max(abs(crps_discrete(g, q, y) - gaussian_crps(0.0, 1.0, y)) for y in ys)
    return PropResult("crps_discrete ~ closed-form Gaussian CRPS (m=999, |y| <= 1)", err < 1e-3, f"max err {err:.2e}")


def check_post_hoc(n: int, rng) -> PropResult:
    bad = 0
    for _ in range(n):
        g = _random_grid(rng, with_median=bool(rng.integers(2)))
        v = rng.normal(size=g.m)
        y = rng.normal()
        base = pinball_sum(g, y, v)
        for kind in ("sort", "pava"):
            if pinball_sum(g, y, isotonize(v, kind).values) > base + 1e-12:
                bad += 1
    return PropResult("sort/PAVA never increase the pinball loss", bad == 0, f"{bad} violations")


def _brute_projection(v: np.ndarray) -> np.ndarray:
    """Best isotonic fit over all contiguous partitions into blocks."""
    m = len(v)
    best, best_err = None, np.inf
    for cuts in product([0, 1], repeat=m - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [m]
        fit = np.concatenate([np.full(b - a, v[a:b].mean()) for a, b in zip(bounds[:-1], bounds[1:])])
        if np.all(np.diff(fit) >= -1e-12):
            err = np.sum((fit - v) ** 2)
            if err < best_err:
                best, best_err = fit, err
    return best


def check_pava(n: int, rng) -> PropResult:
    worst = 0.0
    for _ in range(n):
        v = rng.normal(size=int(rng.integers(1, 5)))
        worst = max(worst, float(np.max(np.abs(pava(v).values - _brute_projection(v)))))
    return PropResult("PAVA == brute-force isotonic projection (m <= 4)", worst < 1e-8, f"max err {worst:.2e}")


def check_moments(n: int, rng) -> PropResult:
    worst_mean, worst_m2 = 0.0, -np.inf
    for _ in range(n):
        comps = [gaussian(rng.normal(), rng.uniform(0.3, 2.0)) for _ in range(2)]
        w = rng.dirichlet([1, 1])
        F = probability_average(comps, w)
        Q = quantile_average(comps, w)
        worst_mean = max(worst_mean, abs(moment(F, 1) - moment(Q, 1)))
        worst_m2 = max(worst_m2, moment(Q, 2) - moment(F, 2))
    ok = worst_mean < 1e-3 and worst_m2 <= 1e-6
    return PropResult("quantile averaging keeps the mean, shrinks the 2nd moment", ok,
                      f"max mean gap {worst_mean:.2e}, max m2 excess {worst_m2:.2e}")


def run_all(seed: int = 0, scale: int = 1000) -> list[PropResult]:
    rng = np.random.default_rng(seed)
    return [
        check_wis_identity(scale, rng),
        check_crps(rng),
        check_post_hoc(scale, rng),
        check_pava(max(scale // 10, 10), rng),
        check_moments(max(scale // 100, 5), rng),
    ]
