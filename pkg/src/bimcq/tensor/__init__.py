"""Minimal float64 tensor library with reverse-mode autodiff."""
from ..errors import NumericError, ShapeError
from .attention import attend, masked_mean, scaled_dot_attention
from .core import (
    Tensor,
    add,
    as_tensor,
    concat,
    cross_entropy,
    div,
    exp,
    getitem,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    tanh,
    tensor,
    transpose,
)
from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "NumericError", "ShapeError", "Tensor", "adam_step", "add", "as_tensor",
    "attend", "concat", "cross_entropy", "div", "exp", "getitem", "gradcheck", "l2_normalize", "log",
    "log_softmax", "masked_mean", "matmul", "mean", "mul", "numerical_grad", "relative_error",
    "reshape", "scaled_dot_attention", "sigmoid", "softmax", "sqrt", "stack", "sub", "sum_", "take",
    "tanh", "tensor", "transpose",
]
