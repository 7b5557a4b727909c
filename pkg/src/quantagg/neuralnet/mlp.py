"""Feed-forward ELU networks on top of the autodiff ops."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(d_in, hidden..., d_out)`` with ELU and dropout after each hidden layer."""

    layer_sizes: tuple[int, ...]
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(s <= 0 for s in sizes):
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def init_params(spec: MlpSpec, prefix: str = "") -> dict[str, np.ndarray]:
    """Uniform fan-in initialization ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for i, (a, b) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        bound = 1.0 / np.sqrt(a)
        params[f"{prefix}W{i}"] = rng.uniform(-bound, bound, size=(a, b))
        params[f"{prefix}b{i}"] = rng.uniform(-bound, bound, size=b)
    return params


def forward(
    spec: MlpSpec,
    params: Mapping[str, ad.Node],
    x,
    rng: np.random.Generator | None = None,
    prefix: str = "",
    upto: int | None = None,
) -> ad.Node:
    """Run the network; ``upto`` stops after that many layers (a feature extractor).

    Dropout is active only when ``rng`` is given.
    """
    h = ad._node(x)
    last = spec.n_layers if upto is None else upto
    for i in range(last):
        h = ad.affine(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])
        if i < spec.n_layers - 1:
            h = ad.elu(h)
            h = ad.dropout(h, spec.dropout_rate, rng)
    return h


def predict(spec: MlpSpec, params: Mapping[str, np.ndarray], x, prefix: str = "") -> np.ndarray:
    leaves = {k: ad.leaf(v) for k, v in params.items()}
    return forward(spec, leaves, x, None, prefix).value
