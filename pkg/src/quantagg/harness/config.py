"""Experiment configuration and its key-value file format.

Files are INI-style (read with :mod:`configparser`). Every key is optional::

    [experiment]
    levels = 99              # m for the even grid k/(m+1), or a comma list of levels
    seeds = 0, 1, 2, 3, 4
    folds = 5
    fractions = 0.72, 0.18, 0.10
    alphas = 0.2, 0.4, 0.6, 0.8
    max_epochs = 100
    workers = 1

    [base_models]
    # one line per family; the value is a JSON list of hyperparameter settings
    linear_pinball = [{}]
    conditional_gaussian = [{"log_sigma": "linear"}, {"hidden": [32]}]
    knn_quantile = [{"k": 20}, {"k": 50}]

    [aggregators]
    methods = local-fine, local-coarse, global-fine, global-coarse, average, median, qra
    penalty = 0.5, 1, 2, 5, 10
    delta0 = 0.1, 0.05, 0.01, 0.001, 0.0001
    hidden = 64, 64

Method names are ``<locality>-<resolution>`` for the weighted aggregators
(``dqa`` is an alias of ``local-fine``) plus ``average``, ``median`` and ``qra``.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..aggregator import LOCALITIES, RESOLUTIONS
from ..basemodels import MODEL_KINDS, BaseModelKind
from ..grid import QuantileGrid

BASELINES = ("average", "median", "qra")
DQA_NAME = "local-fine"


class ConfigError(ValueError):
    pass


def _default_bases() -> dict[str, list[dict]]:
    return {
        "linear_pinball": [{}],
        "conditional_gaussian": [{"log_sigma": "linear"}, {"hidden": [32]}],
        "knn_quantile": [{"k": 20}, {"k": 50}],
    }


def canonical_method(name: str) -> str:
    name = name.strip().lower()
    if name == "dqa":
        return DQA_NAME
    if name in BASELINES:
        return name
    loc, _, res = name.partition("-")
    if loc not in LOCALITIES or res not in RESOLUTIONS:
        raise ConfigError(f"unknown aggregation method {name!r}")
    return name


@dataclass
class ExperimentConfig:
    levels: QuantileGrid = field(default_factory=lambda: QuantileGrid.even(99))
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    folds: int = 5
    fractions: tuple[float, float, float] = (0.72, 0.18, 0.10)
    alphas: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    max_epochs: int = 100
    workers: int = 1
    base_models: dict[str, list[dict]] = field(default_factory=_default_bases)
    methods: tuple[str, ...] = (
        "local-fine", "local-medium", "local-coarse",
        "global-fine", "global-medium", "global-coarse",
        "average", "median", "qra",
    )
    penalty: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0, 10.0)
    delta0: tuple[float, ...] = (1e-1, 5e-2, 1e-2, 1e-3, 1e-4)
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ConfigError(f"split fractions {self.fractions} must be positive and sum to 1")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")
        for a in self.alphas:
            try:
                self.levels.alpha_indices(a)
            except Exception as exc:
                raise ConfigError(f"alpha {a} is not an interval of the grid") from exc
        for name in self.base_models:
            if name not in MODEL_KINDS:
                raise ConfigError(f"unknown base model {name!r}; known: {sorted(MODEL_KINDS)}")
        self.methods = tuple(canonical_method(m) for m in self.methods)
        if DQA_NAME not in self.methods:
            raise ConfigError("the method list must include dqa (local-fine), the reference method")

    def base_kinds(self) -> dict[str, list[BaseModelKind]]:
        return {name: [BaseModelKind(name, dict(h)) for h in grid] for name, grid in self.base_models.items()}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def parse_levels(text: str) -> QuantileGrid:
    """``"99"`` means the even grid with 99 levels; otherwise a comma list."""
    text = text.strip()
    if "," not in text and "." not in text:
        return QuantileGrid.even(int(text))
    return QuantileGrid.parse(text)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a config file (if any) and apply keyword overrides on top."""
    kw: dict = {}
    if path is not None:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            with open(Path(path)) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {"experiment", "base_models", "aggregators"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        try:
            if cp.has_section("experiment"):
                e = cp["experiment"]
                parsers = {
                    "levels": parse_levels, "seeds": _ints, "folds": int, "fractions": _floats,
                    "alphas": _floats, "max_epochs": int, "workers": int,
                }
                for key, value in e.items():
                    if key not in parsers:
                        raise ConfigError(f"unknown key {key!r} in [experiment]")
                    kw[key] = parsers[key](value)
            if cp.has_section("base_models"):
                kw["base_models"] = {k: json.loads(v) for k, v in cp["base_models"].items()}
            if cp.has_section("aggregators"):
                a = cp["aggregators"]
                parsers = {
                    "methods": lambda s: tuple(t for t in s.replace(",", " ").split()),
                    "penalty": _floats, "delta0": _floats, "hidden": _ints,
                }
                for key, value in a.items():
                    if key not in parsers:
                        raise ConfigError(f"unknown key {key!r} in [aggregators]")
                    kw[key] = parsers[key](value)
        except (ValueError, json.JSONDecodeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value in {path}: {exc}") from exc
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kw)
