"""Adam with bias correction and the warmup-stable-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NumericsError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer moments; one slot per parameter, aligned by position."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    scratch: list[np.ndarray] = field(default_factory=list)


def adam_init(params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    state.scratch = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState,
              lr_now: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    A ``None`` gradient counts as zero (the parameter still decays its moments).
    """
    if lr_now is None:
        lr_now = state.lr
    if lr_now < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr_now}")
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError("params, grads and optimizer state are misaligned")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    # theta -= lr * (m/bc1) / (sqrt(v/bc2) + eps), refactored so the whole
    # update runs in-place with two temporaries per parameter
    sqrt_bc2 = np.sqrt(bc2)
    alpha = lr_now * sqrt_bc2 / bc1
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name or i} of shape {p.data.shape}"
            )
        # a finite total implies finite entries; the precise scan only runs
        # when the cheap reduction trips (inf/nan, or pure-float32 overflow)
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {p.name or i}")
        m, v, buf = state.m[i], state.v[i], state.scratch[i]
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=buf)
        m += buf
        v *= state.beta2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - state.beta2
        v += buf
        np.sqrt(v, out=buf)
        buf += state.eps * sqrt_bc2
        np.divide(m, buf, out=buf)
        buf *= alpha
        p.data -= buf
    return state


@dataclass(frozen=True)
class WsdSchedule:
    """Piecewise-linear warmup / stable / decay learning rate.

    Warmup rises linearly from 0 over the first ``warmup_fraction`` of steps,
    holds at ``peak_lr``, then decays linearly to exactly 0 over the final
    ``decay_fraction``.
    """

    total_steps: int
    peak_lr: float
    warmup_fraction: float = 0.10
    decay_fraction: float = 0.10

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction + self.decay_fraction <= 1.0:
            raise ContractError("warmup and decay fractions must fit inside the run")


def schedule_lr(sched: WsdSchedule, step: int) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ContractError(
            f"step {step} outside schedule range [0, {sched.total_steps}]"
        )
    warmup_end = sched.warmup_fraction * sched.total_steps
    decay_start = sched.total_steps * (1.0 - sched.decay_fraction)
    if warmup_end > 0 and step < warmup_end:
        return sched.peak_lr * step / warmup_end
    if step <= decay_start:
        return sched.peak_lr
    return sched.peak_lr * (sched.total_steps - step) / (sched.total_steps - decay_start)
