"""Tensor arithmetic with reverse-mode autodiff, Adam, and the WSD schedule."""

from .optim import AdamState, WsdSchedule, adam_init, adam_step, schedule_lr
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    glorot_uniform,
    log_softmax,
    no_grad,
    normal_init,
    softmax,
    uniform_init,
    zero_grads,
)

__all__ = [
    "AdamState",
    "Tensor",
    "WsdSchedule",
    "adam_init",
    "adam_step",
    "as_tensor",
    "concat",
    "glorot_uniform",
    "log_softmax",
    "no_grad",
    "normal_init",
    "schedule_lr",
    "softmax",
    "uniform_init",
    "zero_grads",
]
