"""Quantile level grids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SYM_TOL = 1e-9


class GridError(ValueError):
    """Raised when a level set violates a grid contract."""


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """A strictly increasing, symmetric set of quantile levels in (0, 1).

    ``alphas`` holds the exclusion probabilities ``2 * tau`` for every level
    below one half, ordered from the widest interval (smallest alpha) to the
    narrowest. The median, when present, pairs with itself and is not listed.
    """

    levels: np.ndarray
    alphas: np.ndarray = field(init=False)
    median_index: int | None = field(init=False)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float).ravel()
        if levels.size == 0:
            raise GridError("grid needs at least one level")
        if not np.all(np.isfinite(levels)) or levels[0] <= 0 or levels[-1] >= 1:
            raise GridError("levels must lie in the open interval (0, 1)")
        if np.any(np.diff(levels) <= 0):
            raise GridError("levels must be strictly increasing")
        if np.any(np.abs(levels + levels[::-1] - 1.0) > _SYM_TOL):
            raise GridError("levels must be symmetric about 0.5")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        half = levels.size // 2
        alphas = 2.0 * levels[:half]
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        median = half if levels.size % 2 == 1 else None
        object.__setattr__(self, "median_index", median)

    @classmethod
    def even(cls, m: int) -> "QuantileGrid":
        """Levels ``1/(m+1), ..., m/(m+1)``; ``even(99)`` gives 0.01..0.99."""
        if m < 1:
            raise GridError("m must be positive")
        return cls(np.arange(1, m + 1) / (m + 1))

    @classmethod
    def parse(cls, text: str) -> "QuantileGrid":
        """Parse ``"9"`` (even grid) or a comma-separated level list."""
        text = text.strip()
        if "," not in text and "." not in text:
            return cls.even(int(text))
        return cls(np.array([float(t) for t in text.split(",") if t.strip()]))

    @property
    def m(self) -> int:
        return int(self.levels.size)

    @property
    def has_median(self) -> bool:
        return self.median_index is not None

    @property
    def anchor_index(self) -> int:
        """Index of the smallest level >= 0.5 (the min-max sweep start)."""
        return int(np.searchsorted(self.levels, 0.5 - _SYM_TOL))

    def is_even(self) -> bool:
        gaps = np.diff(self.levels)
        if gaps.size == 0:
            return True
        return bool(np.all(np.abs(gaps - gaps[0]) <= _SYM_TOL))

    def alpha_indices(self, alpha: float) -> tuple[int, int]:
        """Positions of the ``alpha/2`` and ``1 - alpha/2`` levels."""
        hits = np.flatnonzero(np.abs(self.alphas - alpha) <= _SYM_TOL)
        if hits.size == 0:
            raise GridError(f"alpha={alpha} is not supported by this grid")
        lo = int(hits[0])
        return lo, self.m - 1 - lo

    def index_of(self, tau: float) -> int:
        hits = np.flatnonzero(np.abs(self.levels - tau) <= _SYM_TOL)
        if hits.size == 0:
            raise GridError(f"level {tau} is not on this grid")
        return int(hits[0])

    def __eq__(self, other):
        if not isinstance(other, QuantileGrid):
            return NotImplemented
        return self.m == other.m and bool(
            np.all(np.abs(self.levels - other.levels) <= _SYM_TOL)
        )

    def __hash__(self):
        return hash(tuple(np.round(self.levels, 9)))

    def __repr__(self):
        return f"QuantileGrid(m={self.m}, levels=[{self.levels[0]:.4g}..{self.levels[-1]:.4g}])"

    def to_list(self) -> list[float]:
        return [float(t) for t in self.levels]
