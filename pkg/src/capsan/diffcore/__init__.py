"""Minimal dense-tensor engine: float64 arrays, reverse-mode autodiff, the
neural primitives used by the networks, and the Adam update."""

from .adam import AdamState, adam_step
from .conv import conv2d, frac_conv2d
from .norm import (
    SpectralState,
    cond_batchnorm,
    converge_spectral,
    estimate_sigma,
    pixel_feature_norm,
    spectral_normalize,
)
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    concat,
    div,
    embedding,
    exp,
    grad_enabled,
    leaky_relu,
    log,
    make_op,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    sqrt_guarded,
    sum,
    tensor,
    transpose,
    zero_grads,
)

__all__ = [
    "AdamState",
    "SpectralState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "concat",
    "cond_batchnorm",
    "conv2d",
    "converge_spectral",
    "div",
    "embedding",
    "estimate_sigma",
    "exp",
    "frac_conv2d",
    "grad_enabled",
    "leaky_relu",
    "log",
    "make_op",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "pixel_feature_norm",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "spectral_normalize",
    "sqrt",
    "sqrt_guarded",
    "sum",
    "tensor",
    "transpose",
    "zero_grads",
]
