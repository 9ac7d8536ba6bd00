from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    div,
    dropout,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    slice_,
    square,
    stack,
    sub,
    sum,
    tanh,
    transpose,
    unbind,
)
from .gradcheck import grad_check, numerical_grad, relative_error

__all__ = [
    "Tensor", "add", "as_tensor", "backward", "concat", "conv2d", "div", "dropout", "exp",
    "grad_check", "is_grad_enabled", "log", "matmul", "mean", "mul", "neg", "no_grad",
    "numerical_grad", "relative_error", "relu", "reshape", "sigmoid", "slice_", "square",
    "stack", "sub", "sum", "tanh", "transpose", "unbind",
]
