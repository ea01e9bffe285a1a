"""Minimal dense tensors with reverse-mode differentiation."""

from . import ops
from .conv import conv1d, conv_output_length
from .gradcheck import finite_diff_check, finite_diff_check_params
from .ops import (concat, cos, cross_entropy, dropout, exp, gelu, layer_norm,
                  linear, log, log_softmax, matmul, norm, relu, sigmoid, sin,
                  softmax, sqrt, square, stack, tanh, where)
from .random import DropoutContext, counter_rng, layer_key
from .tensor import Tensor, as_tensor, is_grad_enabled, make_node, no_grad

abs = ops.abs  # noqa: A001

__all__ = [
    "DropoutContext", "Tensor", "abs", "as_tensor", "concat", "conv1d",
    "conv_output_length", "cos", "counter_rng", "cross_entropy", "dropout",
    "exp", "finite_diff_check", "finite_diff_check_params", "gelu",
    "is_grad_enabled", "layer_key", "layer_norm", "linear", "log",
    "log_softmax", "make_node", "matmul", "no_grad", "norm", "relu",
    "sigmoid", "sin", "softmax", "sqrt", "square", "stack", "tanh", "where",
]
