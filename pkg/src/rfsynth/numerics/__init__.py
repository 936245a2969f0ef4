from .linalg import NotPositiveDefiniteError, cholesky, log_det_from_cholesky, solve_lower
from .optim import Adam, AdamState, adam_step, step_decay_lr
from .tensor import (
    DimensionError,
    LabelError,
    Tensor,
    cross_entropy,
    kl_divergence,
    log_softmax_array,
    matmul,
    relu,
    row_norm,
    softmax_array,
    tensor,
)

__all__ = [
    "Adam",
    "AdamState",
    "DimensionError",
    "LabelError",
    "NotPositiveDefiniteError",
    "Tensor",
    "adam_step",
    "cholesky",
    "cross_entropy",
    "kl_divergence",
    "log_det_from_cholesky",
    "log_softmax_array",
    "matmul",
    "relu",
    "row_norm",
    "softmax_array",
    "solve_lower",
    "step_decay_lr",
    "tensor",
]
