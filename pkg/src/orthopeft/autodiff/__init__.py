"""Reverse-mode autodiff over numpy arrays."""
from . import ops
from .gradcheck import grad_check, numeric_grad
from .ops import (
    add, concat, dropout, exp, focal_loss, frobenius_sq, gelu, index, layer_norm, linear,
    log, log_softmax, matmul, mean, mul, patchify, reshape, scale, softmax,
    softmax_cross_entropy, stack, sub, swapaxes, transpose,
)
from .ops import sum as sum_
from .tensor import (
    Parameter, Tensor, get_default_dtype, grad_enabled, no_grad, precision, set_default_dtype,
)

__all__ = [
    "Tensor", "Parameter", "ops", "grad_check", "numeric_grad", "no_grad", "grad_enabled",
    "precision", "get_default_dtype", "set_default_dtype",
    "add", "sub", "mul", "matmul", "linear", "reshape", "transpose", "swapaxes", "index",
    "stack", "concat", "sum_", "mean", "exp", "log", "softmax", "log_softmax", "gelu",
    "layer_norm", "dropout", "softmax_cross_entropy", "focal_loss", "frobenius_sq",
    "patchify", "scale",
]
