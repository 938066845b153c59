"""Tensor arithmetic with reverse-mode gradients and Adam."""
from .tensor import (
    GradTape,
    Gradients,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp,
    concat,
    default_dtype,
    elementwise,
    log,
    matmul,
    max_over_list,
    mul,
    reduce,
    reduce_mean,
    reduce_sum,
    relu,
    repeat_rows,
    reshape,
    scale,
    select,
    sigmoid,
    softmax,
    sub,
    take_rows,
    transpose,
    use_precision,
    zeros,
)
from .optim import AdamState, adam_step
from .gradcheck import GradCheckReport, check_gradients, relative_error

__all__ = [
    "AdamState",
    "GradCheckReport",
    "GradTape",
    "Gradients",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "check_gradients",
    "clamp",
    "concat",
    "default_dtype",
    "elementwise",
    "log",
    "matmul",
    "max_over_list",
    "mul",
    "reduce",
    "reduce_mean",
    "reduce_sum",
    "relative_error",
    "relu",
    "repeat_rows",
    "reshape",
    "scale",
    "select",
    "sigmoid",
    "softmax",
    "sub",
    "take_rows",
    "transpose",
    "use_precision",
    "zeros",
]
