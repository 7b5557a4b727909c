"""Minimal feed-forward networks with reverse-mode gradients and Adam."""
from .autodiff import Node, NumericalError, backward, forward_backward, leaf, tape
from .mlp import MlpSpec, forward, init_params, predict
from .training import AdamState, TrainConfig, TrainResult, adam_step, train_until_stop
from .checkpoint import load_params, save_params

__all__ = [
    "AdamState",
    "MlpSpec",
    "Node",
    "NumericalError",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "backward",
    "forward",
    "forward_backward",
    "init_params",
    "leaf",
    "load_params",
    "predict",
    "save_params",
    "tape",
    "train_until_stop",
]
