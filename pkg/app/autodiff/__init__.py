from app.autodiff.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    dropout,
    elementwise,
    gaussian_noise,
    log_sum_exp,
    masked_fill,
    masked_log_sum_exp,
    matmul,
    no_grad,
    softmax,
    take,
)
from app.autodiff.optim import OptimizerState, make_optimizer, optimizer_step, zero_grads

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "dropout",
    "elementwise",
    "gaussian_noise",
    "log_sum_exp",
    "masked_fill",
    "masked_log_sum_exp",
    "matmul",
    "no_grad",
    "softmax",
    "take",
    "OptimizerState",
    "make_optimizer",
    "optimizer_step",
    "zero_grads",
]
