"""Minimal dense tensor algebra with a scoped reverse-mode tape."""

from .ops import (
    MacCounter,
    add,
    as_tensor,
    concat,
    count_macs,
    exp,
    gather,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    softplus,
    sub,
    sum,
    swap_last,
    tanh,
    transpose,
    unbroadcast,
)
from .tensor import Parameter, Tape, Tensor, backward, current_tape, zero_grads

__all__ = [
    "MacCounter", "Parameter", "Tape", "Tensor", "add", "as_tensor", "backward", "concat",
    "count_macs", "current_tape", "exp", "gather", "gelu", "l2_normalize", "layer_norm", "log",
    "matmul", "mean", "mul", "reshape", "scale", "sigmoid", "slice_axis", "softmax", "softplus",
    "sub", "sum", "swap_last", "tanh", "transpose", "unbroadcast", "zero_grads",
]
