"""Flat JSON checkpoints for parameter dictionaries.

Layout::

    {"format": "quantagg.params/1",
     "meta": {...},                      # e.g. "layer_sizes": [d, h, ..., out]
     "arrays": {"W0": {"shape": [d, h], "data": [row-major floats]}, ...}}

Floats are written with ``repr`` precision, so a load reproduces every bit.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "quantagg.params/1"


def params_to_dict(params: Mapping[str, np.ndarray], **meta: Any) -> dict:
    arrays = {
        k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
        for k, v in params.items()
    }
    return {"format": FORMAT, "meta": meta, "arrays": arrays}


def params_from_dict(blob: Mapping) -> tuple[dict[str, np.ndarray], dict]:
    if blob.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} checkpoint")
    params = {
        k: np.asarray(a["data"], dtype=float).reshape(a["shape"]) for k, a in blob["arrays"].items()
    }
    return params, dict(blob.get("meta", {}))


def save_params(path, params: Mapping[str, np.ndarray], **meta: Any) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, **meta)))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    return params_from_dict(json.loads(Path(path).read_text()))
