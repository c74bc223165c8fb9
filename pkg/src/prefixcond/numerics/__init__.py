from . import kernels
from .optim import AdamWState, LrSchedule, MissingGradError, adamw_step, lr_at
from .rng import make_rng, truncated_normal
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    ZeroNormError,
    add,
    as_tensor,
    backward,
    clamp_max,
    embedding,
    exp,
    gelu,
    grad_enabled,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    softmax,
    sub,
    sum_,
    take,
    transpose,
)

__all__ = [
    "AdamWState",
    "LrSchedule",
    "MissingGradError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "ZeroNormError",
    "add",
    "adamw_step",
    "as_tensor",
    "backward",
    "clamp_max",
    "embedding",
    "exp",
    "gelu",
    "grad_enabled",
    "kernels",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "lr_at",
    "make_rng",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sum_",
    "take",
    "transpose",
    "truncated_normal",
]
