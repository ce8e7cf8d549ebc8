"""Minimal reverse-mode autodiff engine for the M5 network."""

from .gradcheck import GradCheckReport, grad_check, grad_check_report, numeric_grad, relative_error
from .ops import (
    BatchNormState,
    add,
    batchnorm1d,
    conv1d,
    global_avg_pool,
    linear,
    maxpool1d,
    mul,
    record_branches,
    relu,
    softmax_cross_entropy,
)
from .ops import sum as tsum
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, default_dtype, precision, set_default_dtype

__all__ = [
    "AdamState",
    "BatchNormState",
    "GradCheckReport",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batchnorm1d",
    "conv1d",
    "default_dtype",
    "global_avg_pool",
    "grad_check",
    "grad_check_report",
    "linear",
    "maxpool1d",
    "mul",
    "numeric_grad",
    "precision",
    "record_branches",
    "relative_error",
    "relu",
    "set_default_dtype",
    "softmax_cross_entropy",
    "tsum",
]
