from .core import ShapeError, Tensor, is_grad_enabled, no_grad
from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (
    add,
    amax,
    amin,
    bce_with_logits,
    channel_avg_pool,
    channel_max_pool,
    concat,
    conv2d,
    conv_output_size,
    div,
    getitem,
    global_avg_pool,
    global_max_pool,
    linear,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    spatial_max_pool,
    sub,
    transpose,
    upsample_bilinear,
)
from .ops import sum as tsum

__all__ = [
    "ShapeError", "Tensor", "no_grad", "is_grad_enabled",
    "GradCheckReport", "grad_check", "relative_error",
    "add", "sub", "mul", "div", "neg", "maximum", "sigmoid", "relu", "softmax",
    "reshape", "transpose", "getitem", "concat", "tsum", "mean", "amax", "amin",
    "matmul", "linear", "conv2d", "conv_output_size", "global_avg_pool", "global_max_pool",
    "channel_avg_pool", "channel_max_pool", "spatial_max_pool", "upsample_bilinear",
    "bce_with_logits",
]
