"""Dense arithmetic with reverse-mode gradients."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .nn import MLP, LayerNorm, Linear, Module, mlp_forward, uniform_init
from .ops import layer_norm, matmul, softmax_rows
from .tensor import (
    Parameter,
    Tensor,
    as_array,
    constant,
    finite_checks,
    get_dtype,
    no_grad,
    precision,
    precision_name,
    set_precision,
    zero_grads,
)

Matrix = Tensor

__all__ = [
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "MLP",
    "Matrix",
    "Module",
    "Parameter",
    "Tensor",
    "as_array",
    "constant",
    "finite_checks",
    "get_dtype",
    "grad_check",
    "layer_norm",
    "matmul",
    "mlp_forward",
    "no_grad",
    "ops",
    "precision",
    "precision_name",
    "set_precision",
    "softmax_rows",
    "uniform_init",
    "zero_grads",
]
