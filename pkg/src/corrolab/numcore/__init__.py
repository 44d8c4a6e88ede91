"""Differentiable-function core: tape autodiff, MLPs, Adam, gradient checks."""

from corrolab.numcore.tensor import Tensor, backward
from corrolab.numcore.params import ParamVector
from corrolab.numcore.adam import AdamState, adam_step, init_adam, AdamOptimizer
from corrolab.numcore.mlp import (
    MlpSpec,
    TapeParams,
    init_params,
    mlp_forward,
    mlp_forward_t,
    loss_gradients,
    grad_check,
    finite_diff_gradient,
    max_relative_error,
)

__all__ = [
    "Tensor",
    "backward",
    "ParamVector",
    "AdamState",
    "adam_step",
    "init_adam",
    "AdamOptimizer",
    "MlpSpec",
    "TapeParams",
    "init_params",
    "mlp_forward",
    "mlp_forward_t",
    "loss_gradients",
    "grad_check",
    "finite_diff_gradient",
    "max_relative_error",
]
