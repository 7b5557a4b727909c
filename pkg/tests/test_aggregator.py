import numpy as np
import pytest
from scipy.stats import norm

from quantagg import QuantileGrid
from quantagg.aggregator import (
    AggregatorConfig,
    BasePredCube,
    ContractError,
    Ensemble,
    ProvenanceError,
    WeightSpec,
    adaptive_margins,
    apply_weights,
    baseline,
    build_oof_cube,
    constant_margins,
    crossing_penalty,
    fit_ensemble,
    fit_global,
    fit_local,
    make_folds,
)
from quantagg.basemodels import BaseModelKind, KnnQuantile
from quantagg.neuralnet import TrainConfig
from quantagg.scoring import mean_wis, pinball_sum

G9 = QuantileGrid.even(9)
Z9 = norm.ppf(G9.levels)
FAST = TrainConfig(learning_rate=1e-2, weight_decay=0.0, max_epochs=60)


def cube_of(preds):
    n = preds.shape[0]
    return BasePredCube(preds, np.zeros(n, dtype=int), [np.array([], dtype=int)])


# -- folds and provenance ------------------------------------------------------


def test_folds_partition_evenly_and_reproducibly():
    f = make_folds(10, 5, seed=3)
    assert np.array_equal(np.bincount(f), [2] * 5)
    assert np.array_equal(f, make_folds(10, 5, seed=3))
    with pytest.raises(ValueError):
        make_folds(3, 5, seed=0)


def test_oof_cube_provenance_and_fit_count():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    calls = []
    kinds = [BaseModelKind("knn_quantile", {"k": 3}), BaseModelKind("knn_quantile", {"k": 5})]
    cube, models = build_oof_cube(kinds, X, y, G9, K=5, seed=1, fit_hook=lambda kind, k: calls.append((kind.label, k)))
    assert len(calls) == 10 and len(models) == 5
    for k in range(5):
        assert not np.any(cube.fold_of[cube.train_rows[k]] == k)
        held = cube.fold_of == k
        assert np.array_equal(cube.preds[held, 1], models[k][1].predict(X[held]))
    cube.train_rows[0] = np.arange(10)
    with pytest.raises(ProvenanceError):
        cube.check()


# -- weights -------------------------------------------------------------------


def random_spec(rng, resolution, p, m):
    shape = {"coarse": (p,), "medium": (m, p), "fine": (m, p, m)}[resolution]
    w = rng.gamma(1.0, size=shape)
    w /= w.sum(axis=(-2, -1) if resolution == "fine" else -1, keepdims=True)
    return WeightSpec(resolution, "global", p, m, weights=w)


def test_identity_fine_weights_return_single_model():
    P = np.random.default_rng(1).normal(size=(4, 1, 9))
    w = WeightSpec("fine", "global", 1, 9, weights=np.eye(9)[:, None, :])
    assert np.allclose(apply_weights(w, P), P[:, 0])


def test_uniform_coarse_weights_are_the_average():
    P = np.random.default_rng(2).normal(size=(6, 3, 9))
    assert np.allclose(apply_weights(WeightSpec.uniform("coarse", 3, 9), P), P.mean(axis=1))


@pytest.mark.parametrize("resolution", ["coarse", "medium", "fine"])
def test_range_containment(resolution):
    rng = np.random.default_rng(3)
    P = rng.normal(size=(200, 3, 9))
    out = apply_weights(random_spec(rng, resolution, 3, 9), P)
    if resolution == "fine":
        lo, hi = P.min(axis=(1, 2))[:, None], P.max(axis=(1, 2))[:, None]
    else:
        lo, hi = P.min(axis=1), P.max(axis=1)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


@pytest.mark.parametrize("resolution", ["coarse", "medium"])
def test_embedding_as_fine_weights(resolution):
    rng = np.random.default_rng(4)
    P = rng.normal(size=(50, 3, 9))
    w = random_spec(rng, resolution, 3, 9)
    fine = WeightSpec("fine", "global", 3, 9, weights=w.to_fine())
    assert np.max(np.abs(apply_weights(fine, P) - apply_weights(w, P))) < 1e-12


def test_all_weight_on_one_model_reproduces_it():
    P = np.random.default_rng(5).normal(size=(20, 3, 9))
    w = WeightSpec("coarse", "global", 3, 9, weights=np.array([0.0, 1.0, 0.0]))
    assert np.array_equal(apply_weights(w, P), P[:, 1])


def test_simplex_violation_is_a_contract_error():
    with pytest.raises(ContractError):
        WeightSpec("coarse", "global", 2, 9, weights=np.array([0.7, 0.4]))
    w = WeightSpec.uniform("coarse", 2, 9)
    w.weights = np.array([1.2, -0.2])
    with pytest.raises(ContractError):
        apply_weights(w, np.zeros((2, 9)))
    with pytest.raises(ContractError):
        apply_weights(WeightSpec.uniform("coarse", 2, 9), np.zeros((3, 9)))


# -- penalty and margins -------------------------------------------------------


def test_crossing_penalty_examples():
    g2 = QuantileGrid([0.25, 0.75])
    assert crossing_penalty(np.arange(9.0), constant_margins(G9, 0.0)) == 0.0
    assert crossing_penalty([2.0, 1.0], constant_margins(g2, 0.0)) == pytest.approx(1.0)
    assert crossing_penalty([1.0, 1.2], constant_margins(g2, 0.5)) == pytest.approx(0.3)


def test_adaptive_margins_examples():
    g = QuantileGrid([0.2, 0.8])
    r = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert adaptive_margins(r, g, 1.0)[0, 1] == pytest.approx(3.0)
    assert not np.any(adaptive_margins(r, G9, 0.0))
    assert not np.any(adaptive_margins(np.full(7, 2.5), G9, 0.3))
    d = adaptive_margins(np.random.default_rng(6).normal(size=100), G9, 0.1)
    assert np.all(d >= 0) and not np.any(np.tril(d))
    with pytest.raises(ValueError):
        adaptive_margins([], G9, 0.1)


# -- global fitting ------------------------------------------------------------


def gaussian_oracle_problem(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = x + rng.normal(size=n)
    truth = x[:, None] + Z9[None, :]
    noise = [np.sort(rng.normal(scale=3.0, size=(n, 9)), axis=1) for _ in range(2)]
    return np.stack([truth, *noise], axis=1), y


def test_global_coarse_finds_the_true_model():
    P, y = gaussian_oracle_problem(3000, 7)
    Pv, yv = gaussian_oracle_problem(1000, 8)
    cfg = AggregatorConfig(resolution="coarse", locality="global", train=FAST)
    w = fit_global(cube_of(P), y, G9, cfg, (None, Pv, yv), seed=0)
    assert w.weights[0] >= 0.9


def split_experts(n, seed):
    """Model 0 is right below the median and model 1 above it."""
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    low = np.where(G9.levels <= 0.5, Z9, Z9 + 2.0)
    high = np.where(G9.levels >= 0.5, Z9, Z9 - 2.0)
    P = np.broadcast_to(np.stack([low, high])[None], (n, 2, 9)).copy()
    return P, y


def test_global_medium_splits_levels_between_experts():
    P, y = split_experts(3000, 9)
    Pv, yv = split_experts(1000, 10)
    Pt, yt = split_experts(4000, 11)
    val = (None, Pv, yv)
    medium = fit_global(cube_of(P), y, G9, AggregatorConfig(resolution="medium", locality="global", train=FAST), val)
    coarse = fit_global(cube_of(P), y, G9, AggregatorConfig(resolution="coarse", locality="global", train=FAST), val)
    below, above = G9.levels < 0.5, G9.levels > 0.5
    assert np.all(medium.weights[below, 0] > medium.weights[below, 1])
    assert np.all(medium.weights[above, 1] > medium.weights[above, 0])
    assert mean_wis(G9, apply_weights(medium, Pt), yt) < mean_wis(G9, apply_weights(coarse, Pt), yt)


def test_large_penalty_removes_training_crossings():
    rng = np.random.default_rng(12)
    n = 500
    y = rng.normal(size=n)
    P = np.stack([np.broadcast_to(-Z9, (n, 9)), np.broadcast_to(Z9, (n, 9))], axis=1).copy()
    margins = constant_margins(G9, 0.05)
    cfg = AggregatorConfig(resolution="medium", locality="global", penalty=1e3,
                           margin=("constant", 0.05), train=FAST)
    w = fit_global(cube_of(P), y, G9, cfg, (None, P[:100], y[:100]), margins=margins)
    assert crossing_penalty(apply_weights(w, P), margins) == 0.0


# -- local fitting -------------------------------------------------------------


def two_halves(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 1))
    right = X[:, 0] > 0
    y = 3.0 * right + rng.normal(size=n)
    P = np.stack([np.broadcast_to(Z9, (n, 9)), np.broadcast_to(3.0 + Z9, (n, 9))], axis=1).copy()
    return X, P, y, right


def test_local_gate_picks_the_locally_correct_model():
    X, P, y, _ = two_halves(3000, 13)
    Xv, Pv, yv, _ = two_halves(600, 14)
    Xt, _, _, right = two_halves(1000, 15)
    cfg = AggregatorConfig(resolution="coarse", locality="local", hidden=(16,),
                           train=TrainConfig(learning_rate=1e-2, weight_decay=0.0, max_epochs=60))
    w = fit_local(cube_of(P), X, y, G9, cfg, (Xv, Pv, yv), seed=0)
    emitted = w.emit(Xt)
    correct = np.where(right, emitted[:, 1], emitted[:, 0])
    assert np.mean(correct[right] > 0.8) >= 0.9
    assert np.mean(correct[~right] > 0.8) >= 0.9


def constant_weight_problem(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = rng.normal(size=n)
    P = np.stack([np.broadcast_to(1.3 * Z9, (n, 9)), np.broadcast_to(0.7 * Z9, (n, 9))], axis=1).copy()
    return X, P, y


def test_local_does_not_overfit_without_locality_signal():
    X, P, y = constant_weight_problem(5000, 16)
    Xv, Pv, yv = constant_weight_problem(1000, 17)
    Xt, Pt, yt = constant_weight_problem(5000, 18)
    val = (Xv, Pv, yv)
    glob = fit_global(cube_of(P), y, G9, AggregatorConfig(locality="global", train=FAST), val)
    loc = fit_local(cube_of(P), X, y, G9, AggregatorConfig(hidden=(32, 32)), val)
    assert mean_wis(G9, apply_weights(loc, Pt, Xt), yt) <= 1.1 * mean_wis(G9, apply_weights(glob, Pt), yt)
    emitted = loc.emit(Xt[:200])
    assert np.max(np.abs(emitted.sum(axis=(-2, -1)) - 1.0)) < 1e-12
    assert np.all(emitted >= 0)


# -- ensembles -----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_ensemble():
    rng = np.random.default_rng(19)
    X = rng.normal(size=(300, 2))
    y = X[:, 0] + (0.5 + np.abs(X[:, 1])) * rng.normal(size=300)
    kinds = [BaseModelKind("knn_quantile", {"k": 10}), BaseModelKind("knn_quantile", {"k": 60})]
    cube, _ = build_oof_cube(kinds, X[:240], y[:240], G9, K=3, seed=0)
    full = [k.fit(X[:240], y[:240], G9) for k in kinds]
    Pv = np.stack([m.predict(X[240:]) for m in full], axis=1)
    cfg = AggregatorConfig(hidden=(8,), iso=("end_to_end", "mms"),
                           train=TrainConfig(learning_rate=1e-2, weight_decay=1e-5, max_epochs=10))
    ens = fit_ensemble(cube, X[:240], y[:240], G9, cfg, (X[240:], Pv, y[240:]), full, seed=0)
    return ens, cube, X, y, full


def test_ensemble_output_is_monotone_and_roundtrips(small_ensemble):
    ens, _, X, _, _ = small_ensemble
    q = ens.predict(X)
    assert np.all(np.diff(q, axis=1) >= 0)
    clone = Ensemble.from_dict(ens.to_dict())
    assert np.array_equal(clone.predict(X), q)


def test_post_sort_never_increases_pinball(small_ensemble):
    ens, _, X, y, _ = small_ensemble
    P = ens.base_predict(X)
    raw = ens.raw_combine(P, X)
    for op in ("sort", "pava"):
        e = Ensemble(G9, ens.weights, ("post", op), ens.base_models)
        assert np.all(pinball_sum(G9, y, e.combine(P, X)) <= pinball_sum(G9, y, raw) + 1e-12)


def test_unfitted_ensemble_predict_raises():
    with pytest.raises(RuntimeError):
        Ensemble(G9, WeightSpec.uniform("coarse", 2, 9), ("post", "sort")).predict(np.zeros((1, 2)))


def test_trivial_single_model_ensemble():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(50, 1))
    model = KnnQuantile(k=5).fit(X, rng.normal(size=50), G9)
    ens = Ensemble(G9, WeightSpec.uniform("fine", 1, 9), ("post", "sort"), [model])
    assert np.array_equal(ens.predict(X), np.sort(model.predict(X), axis=1))


def test_average_and_median_baselines():
    P = np.zeros((1, 2, 9))
    P[0, 1] = 2.0
    for kind in ("average", "median"):
        assert np.allclose(baseline(kind, cube_of(P), np.zeros(1), G9).combine(P), 1.0)
    same = np.broadcast_to(Z9, (5, 3, 9))
    for kind in ("average", "median"):
        assert np.allclose(baseline(kind, cube_of(same), np.zeros(5), G9).combine(same), Z9)


def test_qra_recovers_linear_coefficients():
    rng = np.random.default_rng(21)
    offsets = rng.normal(size=(2, 9))

    def draw(n):
        s = rng.normal(size=(n, 2))
        P = s[:, :, None] + offsets[None]
        y = 0.3 * s[:, 0] + 0.7 * s[:, 1] + 0.1 * rng.normal(size=n)
        return P, y

    P, y = draw(4000)
    Pv, yv = draw(1000)
    ens = baseline("qra", cube_of(P), y, G9, val=(None, Pv, yv))
    A = ens.qra["A"]
    assert np.all(np.abs(A[:, 0] - 0.3) < 0.1) and np.all(np.abs(A[:, 1] - 0.7) < 0.1)
