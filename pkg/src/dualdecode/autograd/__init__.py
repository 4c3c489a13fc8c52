from .losses import binary_cross_entropy_with_logits, cross_entropy, masked_mse
from .optim import AdamState, AdamW, adamw_step, cosine_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    frobenius_norm_sq,
    gelu,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    square,
    sub,
    sum_,
    take_along_axis,
    transpose,
)

__all__ = [
    "AdamState", "AdamW", "Tensor", "adamw_step", "add", "as_tensor",
    "binary_cross_entropy_with_logits", "concat", "cosine_lr", "cross_entropy", "exp",
    "frobenius_norm_sq", "gelu", "is_grad_enabled", "layer_norm", "log", "log_softmax",
    "masked_mse", "matmul", "mean", "mul", "no_grad", "relu", "reshape", "scale",
    "sigmoid", "slice_", "softmax", "square", "sub", "sum_", "take_along_axis", "transpose",
]
