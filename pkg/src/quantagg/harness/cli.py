"""Command-line entry point: ``quantagg <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..aggregator import AggregatorConfig, Ensemble
from ..conformal import evaluate_intervals, nested_conformalize, nestedness_violations, write_report
from ..distlab import gaussian, tail_ratio_profile, figure_table
from ..grid import GridError
from ..neuralnet import NumericalError, TrainConfig
from ..scoring import coverage_and_length, mean_wis
from .config import ConfigError, ExperimentConfig, load_config, parse_levels
from .data import DataError, Dataset, Standardizer, ingest_csv, split_rows
from .experiment import ExperimentError, run_cell, run_experiment, score_cell, tune_base_models
from .report import Report, emit_report

log = logging.getLogger("quantagg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--target", default="y", help="response column (default: y)")
    p.add_argument("--synthetic", help="use a built-in generator instead of --data")
    p.add_argument("--n", type=int, default=1000, help="rows for --synthetic (default: 1000)")
    p.add_argument("--config", help="key-value experiment config file")
    p.add_argument("--seed", type=int, default=None, help="run a single seed")
    p.add_argument("--out-dir", default=".", help="where outputs are written")
    p.add_argument("--levels", help="number of even levels (e.g. 99) or a comma list")
    p.add_argument("--folds", type=int, help="cross-validation folds")
    p.add_argument("--workers", type=int, help="thread pool size")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quantagg", description="Quantile model aggregation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "train": "tune base quantile models and save checkpoints",
        "aggregate": "fit aggregators on out-of-fold predictions and save ensembles",
        "conformalize": "nested CV+ conformalization of the DQA aggregator",
        "evaluate": "score a saved ensemble on a dataset",
        "benchmark": "full experiment over seeds; writes report.csv and report.json",
        "distlab": "probability vs quantile averaging tables",
        "proptest": "run randomized property checks",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "evaluate":
            p.add_argument("--model", required=True, help="ensemble JSON written by `aggregate`")
        if name == "conformalize":
            p.add_argument("--alphas", help="comma list of miscoverage levels (default: config alphas)")
        if name == "distlab":
            p.add_argument("--weights", default="0.5,0.5", help="mixture weights of N(0,1) and N(0,0.25^2)")
        if name == "proptest":
            p.add_argument("--scale", type=int, default=1000, help="random cases per property")
    return parser


def _config(args) -> ExperimentConfig:
    levels = parse_levels(args.levels) if args.levels else None
    seeds = (args.seed,) if args.seed is not None else None
    return load_config(args.config, levels=levels, folds=args.folds, workers=args.workers, seeds=seeds)


def _dataset(args, seed: int = 0) -> Dataset:
    if args.data and args.synthetic:
        raise UsageError("give either --data or --synthetic, not both")
    if args.data:
        return ingest_csv(args.data, args.target)
    if args.synthetic:
        return Dataset.synthetic(args.synthetic, args.n, seed=seed)
    raise UsageError("one of --data or --synthetic is required")


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    ds = _dataset(args, seed)
    tr, va, _ = split_rows(ds.n, cfg.fractions, seed)
    stats = Standardizer.fit(ds.X[np.concatenate([tr, va])], ds.y[np.concatenate([tr, va])])
    kinds, models, val_wis = tune_base_models(
        cfg.base_kinds(), stats.x(ds.X[tr]), stats.y(ds.y[tr]),
        (stats.x(ds.X[va]), stats.y(ds.y[va])), cfg.levels, seed)
    out = _out(args)
    for kind, model in zip(kinds, models):
        path = out / f"base_{kind.name}.json"
        path.write_text(json.dumps({"model": model.to_dict(), "standardizer": stats.to_dict()}))
        print(f"{kind.label}: validation WIS {val_wis[kind.label]:.6g} -> {path}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    ds = _dataset(args, seed)
    cell = run_cell(ds, cfg, seed)
    out = _out(args)
    for method, ens in cell.ensembles.items():
        path = out / f"ensemble_{method}.json"
        path.write_text(json.dumps({"ensemble": ens.to_dict(), "standardizer": cell.stats.to_dict()}))
    report = Report.empty(cfg.alphas)
    report.add_rows(score_cell(ds, cell, cfg))
    report.finalize()
    emit_report(report, out / "aggregate_report.csv")
    for r in report.detail_rows():
        print(f"{r['method']:<24} test WIS {r['wis']:.6g}  relative {r['rel_wis']:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg.seeds[0])
    blob = json.loads(Path(args.model).read_text())
    ens = Ensemble.from_dict(blob["ensemble"])
    stats = Standardizer.from_dict(blob["standardizer"])
    if stats.keep.size and stats.keep.max() >= ds.X.shape[1]:
        raise DataError(f"model expects at least {stats.keep.max() + 1} features, data has {ds.X.shape[1]}")
    q = stats.y_inverse(ens.predict(stats.x(ds.X)))
    rows = [("wis", mean_wis(ens.grid, q, ds.y))]
    for a in cfg.alphas:
        try:
            cov, length = coverage_and_length(ens.grid, q, ds.y, a)
        except GridError:
            continue
        rows += [(f"coverage_{a:g}", cov), (f"length_{a:g}", length)]
    path = _out(args) / "evaluation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, f"{v:.6g}"])
            print(f"{k:<16} {v:.6g}")
    return EXIT_OK


def cmd_conformalize(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    ds = _dataset(args, seed)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(cfg.alphas)
    tr, va, te = split_rows(ds.n, cfg.fractions, seed)
    fit_rows = np.concatenate([tr, va])
    stats = Standardizer.fit(ds.X[fit_rows], ds.y[fit_rows])
    kinds = [cands[0] for cands in cfg.base_kinds().values()]
    agg = AggregatorConfig(penalty=cfg.penalty[0], margin=("adaptive", cfg.delta0[0]), hidden=tuple(cfg.hidden),
                           train=TrainConfig(learning_rate=1e-3, weight_decay=1e-5, max_epochs=cfg.max_epochs))
    model = nested_conformalize(kinds, agg, stats.x(ds.X[fit_rows]), stats.y(ds.y[fit_rows]), cfg.levels,
                                K=cfg.folds, seed=seed, alphas=alphas)
    iv = {a: (stats.y_inverse(lo), stats.y_inverse(hi)) for a, (lo, hi) in model.intervals(stats.x(ds.X[te])).items()}
    rows = evaluate_intervals(iv, ds.y[te])
    path = _out(args) / "conformal.csv"
    write_report(path, rows)
    for label, count in sorted(model.fit_counts.items()):
        print(f"base fits {label}: {count}")
    bad = nestedness_violations(iv)
    if bad:
        log.warning("%d interval inversions across alpha levels", bad)
    for r in rows:
        print(f"alpha {r.alpha:g}: coverage {r.coverage:.4f} mean length {r.mean_length:.4g} "
              f"unbounded {r.unbounded_count}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    if args.data and args.synthetic:
        raise UsageError("give either --data or --synthetic, not both")
    if args.data:
        datasets = [ingest_csv(args.data, args.target)]
    elif args.synthetic:
        datasets = [Dataset.synthetic(name.strip(), args.n, seed=0) for name in args.synthetic.split(",")]
    else:
        raise UsageError("one of --data or --synthetic is required")
    report = run_experiment(cfg, datasets)
    out = _out(args)
    emit_report(report, out / "report.csv")
    emit_report(report, out / "report.json", fmt="json")
    for r in report.aggregate_rows():
        print(f"{r['dataset']:<18} {r['method']:<24} WIS {r['wis']:.6g}  relative {r['rel_wis']:.6g}")
    return EXIT_OK


def cmd_distlab(args) -> int:
    w = [float(t) for t in args.weights.split(",")]
    out = _out(args)
    table = figure_table(w)
    cols = list(table)
    with open(out / "distlab_figure.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in zip(*(table[c] for c in cols)):
            wr.writerow([f"{v:.6g}" for v in row])
    rows, dropped = tail_ratio_profile([gaussian(0, 1), gaussian(0, 0.25)], w, np.linspace(4, 8, 81))
    with open(out / "distlab_tails.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["v", "prob_ratio", "quant_ratio"])
        for r in rows:
            wr.writerow([f"{r.v:.6g}", f"{r.prob_ratio:.6g}", f"{r.quant_ratio:.6g}"])
    if dropped:
        log.warning("dropped %d tail points to underflow", len(dropped))
    print(f"wrote {out / 'distlab_figure.csv'} and {out / 'distlab_tails.csv'}")
    return EXIT_OK


def cmd_proptest(args) -> int:
    from .props import run_all

    results = run_all(seed=args.seed or 0, scale=args.scale)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


COMMANDS = {
    "train": cmd_train,
    "aggregate": cmd_aggregate,
    "conformalize": cmd_conformalize,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "distlab": cmd_distlab,
    "proptest": cmd_proptest,
}


def _exit_code(exc: BaseException) -> int:
    cause = exc.__cause__ if isinstance(exc, ExperimentError) and exc.__cause__ else exc
    if isinstance(cause, DataError):
        return EXIT_DATA
    if isinstance(cause, (NumericalError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(cause, (UsageError, ConfigError, GridError)):
        return EXIT_USAGE
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, GridError, DataError, NumericalError, FloatingPointError,
            ExperimentError) as exc:
        print(f"quantagg {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"quantagg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
