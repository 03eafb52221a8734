from .core import (
    CLAMP_EPS,
    Tape,
    Tensor,
    as_tensor,
    get_default_dtype,
    get_mode,
    set_default_dtype,
    set_mode,
    using,
)
from .ops import (
    DomainError,
    ShapeError,
    add,
    div,
    exp,
    linear_scan,
    log,
    matmul,
    mul,
    repeat,
    reshape,
    rmsnorm,
    scale,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    square,
    ssd_scan,
    sub,
    tmean,
    transpose,
    tsum,
)
from .optim import AdamW, GradientError, clip_grad_norm, lr_schedule

__all__ = [
    "AdamW", "CLAMP_EPS", "DomainError", "GradientError", "ShapeError",
    "Tape", "Tensor", "add", "as_tensor", "clip_grad_norm", "div", "exp",
    "get_default_dtype", "get_mode", "linear_scan", "log", "lr_schedule",
    "matmul", "mul", "repeat", "reshape", "rmsnorm", "scale", "set_default_dtype",
    "set_mode", "sigmoid", "silu", "softmax", "softplus", "sqrt", "square",
    "ssd_scan", "sub", "tmean", "transpose", "tsum", "using",
]
