"""Adam with decoupled weight decay, minibatching, and early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Node, NumericalError, forward_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int | None = None  # None: adaptive to the training size
    max_epochs: int = 100
    early_stop_patience_updates: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay nonnegative")
        if self.max_epochs < 1 or self.early_stop_patience_updates < 1:
            raise ValueError("max_epochs and patience must be positive")

    def batch_for(self, n: int) -> int:
        if self.batch_size is not None:
            return max(1, min(self.batch_size, n))
        return max(1, min(n, 256, max(32, n // 32)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One Adam update; weight decay is decoupled (applied directly to the weights)."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        step = (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + config.eps)
        out[k] = p - config.learning_rate * (step + config.weight_decay * p)
    return out, state


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    epochs_run: int
    updates: int
    history: list[float] = field(default_factory=list)


LossFn = Callable[[Mapping[str, Node], np.ndarray, np.random.Generator], Node]


def train_until_stop(
    params: Mapping[str, np.ndarray],
    loss_fn: LossFn,
    n_train: int,
    val_fn: Callable[[Mapping[str, np.ndarray]], float],
    config: TrainConfig,
) -> TrainResult:
    """Minibatch Adam with early stopping on a validation score.

    ``loss_fn(params, batch_index, rng)`` builds the training loss for the rows
    ``batch_index``; ``val_fn(params)`` scores the current parameters (lower is
    better). Validation runs after every epoch; training stops once the best
    score has not improved for ``early_stop_patience_updates`` updates, and
    the best epoch's parameters are returned.
    """
    if n_train < 1:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    state = AdamState.zeros_like(params)
    batch = config.batch_for(n_train)
    best, best_params, best_epoch = np.inf, params, 0
    since_best = 0
    history = []
    updates = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch):
            idx = order[start : start + batch]
            _, grads = forward_backward(lambda p: loss_fn(p, idx, rng), params)
            params, state = adam_step(params, grads, state, config)
            updates += 1
            since_best += 1
        score = float(val_fn(params))
        if not np.isfinite(score):
            raise NumericalError(f"non-finite validation score at epoch {epoch}")
        history.append(score)
        if score < best:
            best, best_params, best_epoch = score, params, epoch
            since_best = 0
        elif since_best >= config.early_stop_patience_updates:
            break
    log.debug("stopped after %d epochs (best %d, score %.6g)", epoch, best_epoch, best)
    return TrainResult(best_params, best_epoch, epoch, updates, history)
