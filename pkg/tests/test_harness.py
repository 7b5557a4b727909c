import logging
import time

import numpy as np
import pytest

from quantagg import QuantileGrid
from quantagg.harness.cli import main
from quantagg.harness.config import ConfigError, ExperimentConfig, load_config
from quantagg.harness.data import DataError, Dataset, Standardizer, ingest_csv, split_rows
from quantagg.harness.experiment import ExperimentError, pve_order, run_experiment
from quantagg.harness.report import Report, emit_report
from quantagg.scoring import mean_wis

G9 = QuantileGrid.even(9)


# -- ingestion -----------------------------------------------------------------


def test_ingest_three_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,y,b\n1,10,2\n3,11,4\n5,12,6\n")
    ds = ingest_csv(p, "y")
    assert ds.X.shape == (3, 2) and ds.columns == ["a", "b"]
    assert np.array_equal(ds.y, [10.0, 11.0, 12.0])
    assert np.array_equal(ds.X[:, 1], [2.0, 4.0, 6.0])


def test_ingest_rejects_malformed_row(tmp_path, caplog):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,3\n1,oops,3\n4,5,6\n")
    with caplog.at_level(logging.WARNING):
        ds = ingest_csv(p, "y")
    assert ds.n == 2 and ds.rejected == 1
    assert "line 3" in caplog.text


def test_ingest_missing_target_names_columns(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("alpha,beta\n1,2\n")
    with pytest.raises(DataError, match="alpha, beta"):
        ingest_csv(p, "y")


def test_non_finite_rows_rejected(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,y\n1,2\nnan,3\n4,inf\n5,6\n")
    ds = ingest_csv(p, "y")
    assert ds.n == 2 and ds.rejected == 2


# -- splits and standardization ------------------------------------------------


def test_split_fractions_and_disjointness():
    tr, va, te = split_rows(1000, seed=3)
    assert (len(tr), len(va), len(te)) == (720, 180, 100)
    assert len(np.unique(np.concatenate([tr, va, te]))) == 1000
    a = split_rows(1000, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, (tr, va, te)))


def test_destandardized_wis_scales_with_sd():
    rng = np.random.default_rng(0)
    y = 40 + 7 * rng.normal(size=300)
    st = Standardizer.fit(np.ones((300, 1)) + rng.normal(size=(300, 1)), y)
    qz = np.sort(rng.normal(size=(300, 9)), axis=1)
    z = st.y(y)
    wis_z = mean_wis(G9, qz, z)
    wis_orig = mean_wis(G9, st.y_inverse(qz), y)
    assert abs(wis_orig - st.y_sd * wis_z) < 1e-9


def test_standardizer_drops_constant_columns():
    X = np.column_stack([np.arange(5.0), np.ones(5)])
    st = Standardizer.fit(X, np.arange(5.0))
    assert st.x(X).shape == (5, 1)
    with pytest.raises(DataError):
        Standardizer.fit(X, np.ones(5))


# -- config --------------------------------------------------------------------


def test_config_file_roundtrip(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(
        "[experiment]\nlevels = 9\nseeds = 1, 2\nfolds = 3\n"
        "[base_models]\nknn_quantile = [{\"k\": 7}]\n"
        "[aggregators]\nmethods = dqa, qra\npenalty = 2\ndelta0 = 0.1\nhidden = 8\n"
    )
    cfg = load_config(p)
    assert cfg.levels == G9 and cfg.seeds == (1, 2) and cfg.folds == 3
    assert cfg.methods == ("local-fine", "qra")
    assert cfg.base_kinds()["knn_quantile"][0].hyper == {"k": 7}
    assert cfg.penalty == (2.0,) and cfg.hidden == (8,)
    assert load_config(p, folds=4).folds == 4


@pytest.mark.parametrize(
    "text",
    [
        "[experiment]\nbogus = 1\n",
        "[experiment]\nfractions = 0.5, 0.5, 0.5\n",
        "[aggregators]\nmethods = qra\n",
        "[base_models]\nforest = [{}]\n",
        "[other]\nx = 1\n",
        "[experiment]\nfolds = many\n",
    ],
)
def test_bad_config_rejected(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


# -- reports -------------------------------------------------------------------


def test_empty_report_is_header_only(tmp_path):
    r = Report.empty([0.2])
    r.finalize()
    emit_report(r, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("dataset,seed,method,wis")


def test_report_rows_and_roundtrip(tmp_path):
    r = Report.empty([0.2])
    r.add_rows([
        {"dataset": "d", "seed": 0, "method": "local-fine", "wis": 1.23456789, "rel_wis": 1.0, "pve": 0.5,
         "coverage_0.2": 0.8, "length_0.2": 2.0, "chosen": "penalty=1,delta0=0.01"},
        {"dataset": "d", "seed": 0, "method": "average", "wis": 2 / 3, "rel_wis": 0.54, "pve": None,
         "coverage_0.2": 0.7, "length_0.2": 1.5, "chosen": "average"},
    ])
    r.finalize()
    assert len(r.detail_rows()) == 2 and len(r.aggregate_rows()) == 2
    assert r.value("local-fine", "wis") == 1.23457
    for fmt in ("csv", "json"):
        path = emit_report(r, tmp_path / f"r.{fmt}", fmt)
        back = Report.from_csv(path) if fmt == "csv" else Report.from_json(path)
        assert back.rows == r.rows and back.columns == r.columns


def test_unwritable_report_path(tmp_path):
    r = Report.empty()
    with pytest.raises(OSError):
        emit_report(r, tmp_path / "missing" / "r.csv")


# -- experiment ----------------------------------------------------------------


SMOKE = dict(
    levels=G9, seeds=(0,), max_epochs=20, penalty=(1.0,), delta0=(1e-2,), hidden=(16,),
    base_models={"linear_pinball": [{}], "knn_quantile": [{"k": 10}, {"k": 30}]},
    methods=("dqa", "global-coarse", "average", "median", "qra"),
)


def test_smoke_run_is_fast_and_consistent():
    ds = Dataset.synthetic("heteroskedastic", 200, seed=1)
    t0 = time.perf_counter()
    report = run_experiment(ExperimentConfig(**SMOKE), ds)
    assert time.perf_counter() - t0 < 60
    assert report.value("local-fine", "rel_wis", seed=0) == 1.0
    methods = {r["method"] for r in report.detail_rows()}
    assert methods == {"base:linear_pinball", "base:knn_quantile", "local-fine", "global-coarse",
                       "average", "median", "qra"}
    for r in report.detail_rows():
        assert 0 <= r["coverage_0.2"] <= 1 and r["length_0.2"] >= 0


def test_report_independent_of_worker_count():
    ds = Dataset.synthetic("two_regime", 250, seed=2)
    a = run_experiment(ExperimentConfig(**SMOKE), ds, workers=1)
    b = run_experiment(ExperimentConfig(**SMOKE), ds, workers=3)
    assert a.rows == b.rows


def test_pve_order_is_sorted():
    cfg = ExperimentConfig(**{**SMOKE, "methods": ("dqa",)})
    datasets = [Dataset.synthetic(name, 200, seed=0) for name in ("independent_noise", "linear_gaussian", "heavy_tailed")]
    order = pve_order(run_experiment(cfg, datasets))
    assert len(order) == 3
    vals = [v for _, v in order]
    assert vals == sorted(vals)


def test_stage_tagged_failure():
    ds = Dataset.synthetic("linear_gaussian", 30, seed=0)
    cfg = ExperimentConfig(**{**SMOKE, "base_models": {"knn_quantile": [{"k": 500}]}})
    with pytest.raises(ExperimentError, match=r"\[base models\]"):
        run_experiment(cfg, ds)


# -- CLI -----------------------------------------------------------------------


def test_cli_usage_and_data_errors(tmp_path, capsys):
    assert main([]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    assert main(["train"]) == 1
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["train", "--data", str(p), "--target", "y"]) == 2
    assert "available columns: a, b" in capsys.readouterr().err


def test_cli_proptest_and_distlab(tmp_path):
    assert main(["proptest", "--scale", "100"]) == 0
    assert main(["distlab", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "distlab_figure.csv").exists() and (tmp_path / "distlab_tails.csv").exists()


def test_cli_pipeline(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(
        "[experiment]\nlevels = 9\nseeds = 0\nmax_epochs = 10\n"
        "[base_models]\nlinear_pinball = [{}]\nknn_quantile = [{\"k\": 15}]\n"
        "[aggregators]\nmethods = dqa, global-coarse\npenalty = 1\ndelta0 = 0.01\nhidden = 8\n"
    )
    common = ["--synthetic", "heteroskedastic", "--n", "200", "--config", str(cfg), "--out-dir", str(tmp_path)]
    assert main(["train", *common]) == 0
    assert (tmp_path / "base_knn_quantile.json").exists()
    assert main(["aggregate", *common]) == 0
    model = tmp_path / "ensemble_local-fine.json"
    assert main(["evaluate", *common, "--model", str(model)]) == 0
    assert main(["conformalize", *common, "--folds", "3", "--alphas", "0.2,0.4"]) == 0
    assert (tmp_path / "conformal.csv").read_text().startswith("alpha,coverage,mean_length,unbounded_count")
    assert main(["benchmark", *common]) == 0
    assert Report.from_csv(tmp_path / "report.csv").value("local-fine", "rel_wis") == 1.0
