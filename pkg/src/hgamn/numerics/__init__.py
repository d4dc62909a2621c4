"""Minimal differentiable computation engine on top of numpy."""
from . import ops
from .container import ContainerError, digest, load_container, save_container
from .gradcheck import grad_check, grad_check_report
from .layers import GRUParams, dense, gru_cell, gru_sequence
from .ops import dropout, softmax
from .optim import AdamState, adam_step, linear_decay
from .params import ParamStore, rng_stream, uniform_init
from .tensor import (
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    TrainingStateError,
    as_tensor,
    default_dtype,
    precision,
    set_default_dtype,
)

__all__ = [
    "AdamState",
    "ContainerError",
    "DimensionError",
    "GRUParams",
    "NumericError",
    "ParamStore",
    "Tape",
    "Tensor",
    "TrainingStateError",
    "adam_step",
    "as_tensor",
    "default_dtype",
    "dense",
    "digest",
    "dropout",
    "grad_check",
    "grad_check_report",
    "gru_cell",
    "gru_sequence",
    "linear_decay",
    "load_container",
    "ops",
    "precision",
    "rng_stream",
    "save_container",
    "set_default_dtype",
    "softmax",
    "uniform_init",
]
