"""Minimal reverse-mode autodiff: tensors, MLPs, and optimizers."""

from .tensor import (
    Tensor,
    add,
    concat,
    exp,
    matmul,
    mean_,
    mul,
    no_grad,
    pow_const,
    relu,
    sqrt,
    square,
    sum_,
    tanh,
)
from .nn import BatchNorm, Mlp, MlpSpec, fd_input_gradient, mlp_spec
from .optim import OptimizerState, optimizer_apply, zero_gradients

__all__ = [
    "Tensor", "add", "concat", "exp", "matmul", "mean_", "mul", "no_grad",
    "pow_const", "relu", "sqrt", "square", "sum_", "tanh",
    "BatchNorm", "Mlp", "MlpSpec", "fd_input_gradient", "mlp_spec",
    "OptimizerState", "optimizer_apply", "zero_gradients",
]
