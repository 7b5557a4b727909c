"""Isotonization operators and their almost-everywhere linear backward maps.

Each operator maps a vector (or a batch of row vectors) onto the
nondecreasing cone and reports a compact description of the linear map it
applied locally. Sorting and the min-max sweep are *selections* (every output
slot copies one input slot); isotonic projection is a *block average*.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Selection:
    """``out[..., k] = v[..., src[..., k]]``."""

    src: np.ndarray

    def apply(self, dv: np.ndarray) -> np.ndarray:
        return np.take_along_axis(np.asarray(dv, dtype=float), self.src, axis=-1)

    def vjp(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        out = np.zeros_like(g)
        if g.ndim == 1:
            np.add.at(out, self.src, g)
        else:
            rows = np.arange(g.shape[0])[:, None]
            np.add.at(out, (np.broadcast_to(rows, g.shape), self.src), g)
        return out


@dataclass(frozen=True)
class BlockAverage:
    """Averages within contiguous blocks; ``labels[..., k]`` is the block id of slot k."""

    labels: np.ndarray

    def apply(self, dv: np.ndarray) -> np.ndarray:
        dv = np.asarray(dv, dtype=float)
        if dv.ndim == 1:
            return _block_mean(dv, self.labels)
        return np.stack([_block_mean(r, lab) for r, lab in zip(dv, self.labels)])

    # the map is symmetric
    vjp = apply


def _block_mean(v: np.ndarray, labels: np.ndarray) -> np.ndarray:
    sums = np.bincount(labels, weights=v)
    counts = np.bincount(labels)
    return (sums / counts)[labels]


@dataclass(frozen=True)
class IsotonicResult:
    values: np.ndarray
    backward: Selection | BlockAverage


def sort_op(v) -> IsotonicResult:
    """Order statistics; ties keep their original relative order."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] < 1:
        raise ValueError("need at least one entry")
    perm = np.argsort(v, axis=-1, kind="stable")
    return IsotonicResult(np.take_along_axis(v, perm, axis=-1), Selection(perm))


def _pava_row(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = v.size
    sums = np.empty(m)
    counts = np.empty(m, dtype=np.int64)
    top = -1
    for x in v:
        top += 1
        sums[top] = x
        counts[top] = 1
        while top > 0 and sums[top - 1] * counts[top] > sums[top] * counts[top - 1]:
            sums[top - 1] += sums[top]
            counts[top - 1] += counts[top]
            top -= 1
    counts = counts[: top + 1]
    labels = np.repeat(np.arange(top + 1), counts)
    means = sums[: top + 1] / counts
    return means[labels], labels


def pava(v) -> IsotonicResult:
    """Euclidean projection onto the nondecreasing cone (pool adjacent violators)."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] < 1:
        raise ValueError("need at least one entry")
    if v.ndim == 1:
        vals, labels = _pava_row(v)
        return IsotonicResult(vals, BlockAverage(labels))
    rows = [_pava_row(r) for r in v]
    vals = np.stack([r[0] for r in rows])
    labels = np.stack([r[1] for r in rows])
    return IsotonicResult(vals, BlockAverage(labels))


def min_max_sweep(v, median_index: int) -> IsotonicResult:
    """Cumulative max upward and cumulative min downward from ``median_index``.

    ``median_index`` is zero-based. On ties the value nearest the anchor wins,
    so the backward map matches the forward pass's choice.
    """
    v = np.asarray(v, dtype=float)
    m = v.shape[-1]
    if not 0 <= median_index < m:
        raise IndexError(f"median_index {median_index} outside [0, {m})")
    k0 = median_index
    idx = np.broadcast_to(np.arange(m), v.shape)

    up = v[..., k0:]
    run_max = np.maximum.accumulate(up, axis=-1)
    new_up = np.ones(up.shape, dtype=bool)
    new_up[..., 1:] = up[..., 1:] > run_max[..., :-1]
    src_up = np.maximum.accumulate(np.where(new_up, idx[..., k0:], -1), axis=-1)

    down = v[..., : k0 + 1][..., ::-1]
    run_min = np.minimum.accumulate(down, axis=-1)
    new_down = np.ones(down.shape, dtype=bool)
    new_down[..., 1:] = down[..., 1:] < run_min[..., :-1]
    rev_idx = idx[..., : k0 + 1][..., ::-1]
    src_down = np.minimum.accumulate(np.where(new_down, rev_idx, m), axis=-1)[..., ::-1]

    src = np.concatenate([src_down[..., :-1], src_up], axis=-1)
    return IsotonicResult(np.take_along_axis(v, src, axis=-1), Selection(src))


OPERATORS = ("sort", "pava", "mms")


def isotonize(v, kind: str, median_index: int | None = None) -> IsotonicResult:
    """Dispatch by operator name: ``"sort"``, ``"pava"`` or ``"mms"``."""
    if kind == "sort":
        return sort_op(v)
    if kind == "pava":
        return pava(v)
    if kind == "mms":
        if median_index is None:
            raise ValueError("min-max sweep needs the anchor index")
        return min_max_sweep(v, median_index)
    raise ValueError(f"unknown isotonization operator {kind!r}")
