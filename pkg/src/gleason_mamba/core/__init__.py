from .ops import (
    ACTIVATIONS,
    DifferentiableOp,
    DimensionError,
    GradCheckError,
    activation,
    activation_backward,
    activation_op,
    as_tensor,
    conv2d,
    conv2d_backward,
    conv2d_op,
    grad_check,
    linear,
    linear_backward,
    linear_op,
    normalize,
    normalize_backward,
    normalize_op,
    sigmoid,
)
from .serialize import load_checkpoint, save_checkpoint, read_tensor, write_tensor

__all__ = [
    "ACTIVATIONS",
    "DifferentiableOp",
    "DimensionError",
    "GradCheckError",
    "activation",
    "activation_backward",
    "activation_op",
    "as_tensor",
    "conv2d",
    "conv2d_backward",
    "conv2d_op",
    "grad_check",
    "linear",
    "linear_backward",
    "linear_op",
    "load_checkpoint",
    "normalize",
    "normalize_backward",
    "normalize_op",
    "read_tensor",
    "save_checkpoint",
    "sigmoid",
    "write_tensor",
]
