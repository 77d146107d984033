"""Dense reverse-mode autodiff on numpy arrays: tensors, ops, gradient checks."""

from .tensor import Tensor, Tape, active_tape, record_op
from .ops import (
    add, sub, mul, neg, scale, matmul, transpose, reshape, concat, slice_,
    gather_rows, sum_, mean_, relu, gelu, softmax, log_softmax, layer_norm,
    mse, cross_entropy, as_tensor,
)
from .convolution import conv2d, conv2d_transpose, conv2d_output_shape, reference_conv2d
from .gradcheck import grad_check, GradCheckReport

__all__ = [
    "Tensor", "Tape", "active_tape", "record_op",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "reshape",
    "concat", "slice_", "gather_rows", "sum_", "mean_", "relu", "gelu",
    "softmax", "log_softmax", "layer_norm", "mse", "cross_entropy", "as_tensor",
    "conv2d", "conv2d_transpose", "conv2d_output_shape", "reference_conv2d",
    "grad_check", "GradCheckReport",
]
