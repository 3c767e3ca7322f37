"""Tensor arithmetic, reverse-mode autodiff and optimisation."""

from .kernels import backend
from .optim import AdamWState, adamw_step, clip_grad_norm, decay_mask
from .rng import make_rng, trunc_normal
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    exp,
    gelu,
    get_dtype,
    getitem,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    parameter,
    reshape,
    softmax,
    square,
    sub,
    sum_,
    swapaxes,
    take_rows,
    transpose,
    use_dtype,
)

__all__ = [
    "AdamWState", "Tensor", "adamw_step", "add", "as_tensor", "backend", "backward",
    "broadcast_to", "clip_grad_norm", "concat", "cross_entropy", "decay_mask", "div",
    "exp", "gelu", "get_dtype", "getitem", "l2_normalize", "layer_norm", "linear", "log",
    "log_softmax", "make_rng", "matmul", "mean", "mul", "parameter", "reshape", "softmax",
    "square", "sub", "sum_", "swapaxes", "take_rows", "transpose", "trunc_normal", "use_dtype",
]
