"""Probability components of the auto-encoding objectives.

Diagonal Gaussian encoder distribution with reparameterized sampling, the
Bernoulli-with-logits decoder likelihood in its stable cross-entropy form, and
the fixed standard-Normal prior used as the latent anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numcore import Tensor, as_tensor

LOG_TWO_PI = math.log(2.0 * math.pi)

# Clamp range for predicted log-variances; keeps both the density and the
# reparameterized noise scale finite during early training.
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class GaussianCode:
    """Per-sample diagonal-Gaussian latent parameters plus one sample.

    ``z == mean + exp(0.5 * log_var) * eps`` holds exactly; ``eps`` is kept so
    the sample is reconstructible.
    """

    mean: Tensor
    log_var: Tensor
    z: Tensor
    eps: np.ndarray


@dataclass(frozen=True)
class PriorSpec:
    """Standard-Normal latent anchor: mean 0, variance 1, ``dim`` components."""

    dim: int


def _diag_gaussian_log_prob(mean: Tensor, log_var: Tensor, z: Tensor) -> Tensor:
    diff = z - mean
    per_dim = -0.5 * (LOG_TWO_PI + log_var + diff * diff * (-log_var).exp())
    return per_dim.sum(axis=1)


def gaussian_log_prob(code: GaussianCode, z: Tensor) -> Tensor:
    """Log density of ``z`` under the code's diagonal Gaussian, summed over dims."""
    z = as_tensor(z)
    if z.shape != code.mean.shape:
        raise ContractError(
            f"z shape {z.shape} does not match code shape {code.mean.shape}"
        )
    if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(code.mean.data))
            and np.all(np.isfinite(code.log_var.data))):
        raise ContractError("gaussian_log_prob requires finite inputs")
    return _diag_gaussian_log_prob(code.mean, code.log_var, z)


def reparameterized_sample(mean: Tensor, log_var: Tensor,
                           rng: np.random.Generator) -> GaussianCode:
    """Draw ``z = mean + exp(0.5 * log_var) * eps`` with recorded noise.

    ``log_var`` is clamped to [-10, 10] before use; the clamped value is what
    the returned code carries.
    """
    mean = as_tensor(mean)
    log_var = as_tensor(log_var)
    if mean.shape != log_var.shape:
        raise ContractError(
            f"mean shape {mean.shape} does not match log_var shape {log_var.shape}"
        )
    log_var = log_var.clip(LOG_VAR_MIN, LOG_VAR_MAX)
    eps = rng.standard_normal(mean.shape, dtype=mean.dtype)
    z = mean + (0.5 * log_var).exp() * Tensor(eps)
    return GaussianCode(mean=mean, log_var=log_var, z=z, eps=eps)


def bernoulli_log_prob(logits: Tensor, x: Tensor) -> Tensor:
    """Bernoulli log likelihood summed over pixels, computed from logits.

    Uses ``x * l - softplus(l)``, which equals ``x log sigma(l) +
    (1 - x) log(1 - sigma(l))`` without ever forming the probabilities.
    """
    logits = as_tensor(logits)
    x = as_tensor(x)
    if logits.shape != x.shape:
        raise ContractError(
            f"logits shape {logits.shape} does not match x shape {x.shape}"
        )
    xd = x.data
    if not np.all((xd == 0.0) | (xd == 1.0)):
        raise ContractError("bernoulli_log_prob requires binary targets in {0, 1}")
    return (x * logits - logits.softplus()).sum(axis=1)


def prior_log_prob(spec: PriorSpec, z: Tensor) -> Tensor:
    """Standard-Normal log density of ``z``, summed over dims.

    Shares the diagonal-Gaussian code path with zero parameters, so it agrees
    with ``gaussian_log_prob`` on a zero code bit for bit.
    """
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != spec.dim:
        raise ContractError(f"z shape {z.shape} does not match prior dim {spec.dim}")
    zeros = Tensor(np.zeros(z.shape, dtype=z.dtype))
    return _diag_gaussian_log_prob(zeros, zeros, z)
