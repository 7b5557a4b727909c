import itertools

import numpy as np
import pytest

from quantagg.grid import QuantileGrid
from quantagg.isotonic import isotonize, min_max_sweep, pava, sort_op
from quantagg.scoring import pinball_sum

# (grid, v, y) where the min-max sweep makes the summed pinball loss worse
MMS_COUNTEREXAMPLE = (QuantileGrid([0.25, 0.5, 0.75]), np.array([0.0, 0.0, -10.0]), -10.0)


def brute_force_projection(v):
    """Exact l2 projection onto the monotone cone by enumerating contiguous partitions."""
    m = len(v)
    best, best_d = None, np.inf
    for cuts in itertools.product([0, 1], repeat=m - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [m]
        u = np.empty(m)
        for a, b in zip(bounds[:-1], bounds[1:]):
            u[a:b] = np.mean(v[a:b])
        if np.all(np.diff(u) >= -1e-12):
            d = np.sum((u - v) ** 2)
            if d < best_d:
                best, best_d = u, d
    return best


def test_sort_examples():
    r = sort_op([3.0, 1.0, 2.0])
    assert r.values.tolist() == [1, 2, 3]
    r = sort_op([1.0, 2.0, 3.0])
    assert r.backward.src.tolist() == [0, 1, 2]
    r = sort_op([2.0, 2.0, 1.0])
    assert r.values.tolist() == [1, 2, 2]
    assert r.backward.src.tolist() == [2, 0, 1]


def test_pava_examples():
    assert np.allclose(pava([1.0, 3.0, 2.0]).values, [1, 2.5, 2.5])
    assert np.allclose(pava([2.0, 1.0]).values, [1.5, 1.5])
    assert np.array_equal(pava([0.0, 1.0, 5.0]).values, [0.0, 1.0, 5.0])
    assert np.allclose(brute_force_projection(np.array([1.0, 3.0, 2.0])), [1, 2.5, 2.5])


def test_pava_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(300):
        m = int(rng.integers(1, 5))
        v = rng.normal(size=m)
        assert np.max(np.abs(pava(v).values - brute_force_projection(v))) < 1e-8


def test_mms_examples():
    # anchors are zero-based here
    assert min_max_sweep([5.0, 3.0, 1.0], 1).values.tolist() == [3, 3, 3]
    assert min_max_sweep([1.0, 3.0, 2.0], 1).values.tolist() == [1, 3, 3]
    assert min_max_sweep([1.0, 2.0, 3.0], 1).values.tolist() == [1, 2, 3]
    with pytest.raises(IndexError):
        min_max_sweep([1.0, 2.0], 2)


def test_mms_matches_recursion():
    rng = np.random.default_rng(2)
    for _ in range(200):
        m = int(rng.integers(1, 10))
        v = rng.normal(size=m)
        k0 = int(rng.integers(0, m))
        ref = v.copy()
        for k in range(k0 + 1, m):
            ref[k] = max(v[k], ref[k - 1])
        for k in range(k0 - 1, -1, -1):
            ref[k] = min(v[k], ref[k + 1])
        assert np.array_equal(min_max_sweep(v, k0).values, ref)


def test_batched_matches_rowwise():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(20, 7))
    for kind in ("sort", "pava", "mms"):
        batch = isotonize(v, kind, 3)
        rows = np.stack([isotonize(r, kind, 3).values for r in v])
        assert np.allclose(batch.values, rows)
        g = rng.normal(size=v.shape)
        rows_vjp = np.stack(
            [isotonize(r, kind, 3).backward.vjp(gr) for r, gr in zip(v, g)]
        )
        assert np.allclose(batch.backward.vjp(g), rows_vjp)


@pytest.mark.parametrize("kind", ["sort", "pava", "mms"])
def test_outputs_monotone_and_idempotent(kind):
    rng = np.random.default_rng(7)
    v = rng.normal(size=(10_000, 6)) * rng.uniform(0.1, 10, size=(10_000, 1))
    out = isotonize(v, kind, 3).values
    assert np.all(np.diff(out, axis=1) >= 0)
    again = isotonize(out, kind, 3).values
    assert np.array_equal(again, out)


@pytest.mark.parametrize("kind", ["sort", "pava"])
@pytest.mark.parametrize("p", [1, 2, np.inf])
def test_lp_error_can_only_improve(kind, p):
    rng = np.random.default_rng(11)
    for _ in range(500):
        m = int(rng.integers(2, 12))
        target = np.sort(rng.normal(size=m))
        v = target + rng.normal(scale=rng.uniform(0.1, 3), size=m)
        after = np.linalg.norm(isotonize(v, kind).values - target, ord=p)
        before = np.linalg.norm(v - target, ord=p)
        assert after <= before + 1e-12


@pytest.mark.parametrize("kind", ["sort", "pava"])
def test_pinball_can_only_improve(kind):
    rng = np.random.default_rng(13)
    strict_seen = 0
    for _ in range(2000):
        g = QuantileGrid.even(int(rng.integers(2, 15)))
        v = rng.normal(size=g.m)
        y = rng.normal()
        iso = isotonize(v, kind).values
        before, after = pinball_sum(g, y, v), pinball_sum(g, y, iso)
        assert after <= before + 1e-12
        if after < before - 1e-12:
            strict_seen += 1
    assert strict_seen > 0


def test_mms_counterexample_increases_pinball():
    g, v, y = MMS_COUNTEREXAMPLE
    out = min_max_sweep(v, g.anchor_index).values
    assert pinball_sum(g, y, out) > pinball_sum(g, y, v)
    # sort and PAVA do not increase it on the same triple
    assert pinball_sum(g, y, sort_op(v).values) <= pinball_sum(g, y, v)
    assert pinball_sum(g, y, pava(v).values) <= pinball_sum(g, y, v)


def _central_diff(f, v, d, h=1e-6):
    return (f(v + h * d) - f(v - h * d)) / (2 * h)


@pytest.mark.parametrize("kind", ["sort", "pava", "mms"])
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(17)
    checked = 0
    while checked < 1000:
        m = int(rng.integers(2, 9))
        v = rng.normal(size=m)
        d = rng.normal(size=m)
        f = lambda z: isotonize(z, kind, m // 2).values
        res = isotonize(v, kind, m // 2)
        # skip points within the finite-difference step of a kink
        if kind == "pava" and np.min(np.abs(np.diff(res.values))[np.diff(res.values) > 0], initial=1) < 1e-3:
            continue
        if np.min(np.abs(v[:, None] - v[None, :]) + np.eye(m) * 10) < 1e-3:
            continue
        fd = _central_diff(f, v, d)
        an = res.backward.apply(d)
        assert np.allclose(an, fd, rtol=1e-6, atol=1e-6)
        # vjp is the transpose of apply
        g = rng.normal(size=m)
        assert np.dot(g, an) == pytest.approx(np.dot(res.backward.vjp(g), d), rel=1e-10, abs=1e-12)
        checked += 1
