"""Contrastive mathematics over batches of latent codes.

Cosine similarity matrices, temperature-scaled logits, the InfoNCE loss, and
the mean-denominator discriminator: the probability that a (sample, latent)
pair is the matched one, with the denominator averaging the exponentiated
similarities of the other in-batch latents instead of summing them. Averaging
calibrates the probability at 1/2 under equal logits regardless of batch size,
and makes the whole term an InfoNCE cross-entropy whose positive logit is
shifted by log(B-1). All exponentials are evaluated max-shifted; the
probability itself is formed in log space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numcore import Tensor, as_tensor, concat

# Rows with a norm at or below this are regularized rather than rejected;
# zero-norm latents are a transient of early training.
NORM_FLOOR = 1e-12

# Additive mask value that zeroes an entry's softmax weight without producing
# inf - inf in the max-shifted exponentials.
_MASK = -1e30

# diagonal mask / identity constants, keyed by (B, dtype); B=1000 toy batches
# would otherwise rebuild two 1M-entry arrays every step
_mask_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _diag_constants(B: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (B, np.dtype(dtype).str)
    if key not in _mask_cache:
        eye = np.eye(B, dtype=dtype)
        mask = np.where(np.eye(B, dtype=bool), _MASK, 0.0).astype(dtype)
        if len(_mask_cache) > 32:
            _mask_cache.clear()
        _mask_cache[key] = (eye, mask)
    return _mask_cache[key]


@dataclass
class SimilarityMatrix:
    """Pairwise cosine similarities of one latent batch with itself."""

    S: Tensor  # [B, B], entries in [-1, 1]
    tau: float
    B: int


@dataclass
class DiscriminatorOutput:
    p_match: Tensor          # [B] probability that pair i is the matched one
    log_p_match: Tensor      # [B] same in log space (what losses consume)
    negative_mean: Tensor    # [B] mean over j != i of exp(S[i, j] / tau)


def _normalize_rows(Z: Tensor) -> Tensor:
    norms = (Z * Z).sum(axis=1, keepdims=True).sqrt()
    if np.any(norms.data <= NORM_FLOOR):
        warnings.warn(
            "zero-norm latent row(s); cosine similarity regularized with a "
            f"{NORM_FLOOR:g} denominator floor",
            RuntimeWarning,
            stacklevel=3,
        )
    return Z / norms.clip(min_value=NORM_FLOOR)


def cosine_similarity(A: Tensor, B: Tensor) -> Tensor:
    """Cosine similarity of every row of ``A`` with every row of ``B``."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ContractError(
            f"cosine_similarity needs matching feature dims, got {A.shape} x {B.shape}"
        )
    return _normalize_rows(A).matmul(_normalize_rows(B).T)


def cosine_sim_matrix(Z: Tensor, tau: float = 1.0) -> SimilarityMatrix:
    Z = as_tensor(Z)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ContractError(f"need a [B, D] batch with B >= 2, got shape {Z.shape}")
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return SimilarityMatrix(S=cosine_similarity(Z, Z), tau=tau, B=Z.shape[0])


def match_probability(sim: SimilarityMatrix) -> DiscriminatorOutput:
    """Discriminator probability that each (sample, latent) pair is matched.

    p[i] = e^{s_ii} / (e^{s_ii} + mean_{j != i} e^{s_ij}) with s = S / tau.
    Computed as s_ii - logaddexp(s_ii, logmeanexp of the off-diagonal row),
    so no raw exponential of a logit is ever formed.
    """
    B = sim.B
    if B < 2:
        raise ContractError("need at least one negative: batch size must be >= 2")
    s = sim.S / sim.tau
    eye_np, mask_np = _diag_constants(B, s.dtype)
    diag_mask = Tensor(mask_np)
    eye = Tensor(eye_np)

    log_mean_neg = (s + diag_mask).logsumexp(axis=1) - math.log(B - 1)
    s_pos = (s * eye).sum(axis=1)
    both = concat([s_pos.reshape(B, 1), log_mean_neg.reshape(B, 1)], axis=1)
    log_p = s_pos - both.logsumexp(axis=1)
    return DiscriminatorOutput(
        p_match=log_p.exp(),
        log_p_match=log_p,
        negative_mean=log_mean_neg.exp(),
    )


def infonce_loss(sim_pos: Tensor, sim_all: Tensor, tau: float) -> Tensor:
    """Batch-mean InfoNCE: -log softmax of the positive among B candidates.

    ``sim_all`` carries the per-row candidate similarities with the positive on
    the diagonal (so the denominator, the sum over all B candidates, includes
    the positive term); ``sim_pos`` must equal that diagonal.
    """
    sim_pos, sim_all = as_tensor(sim_pos), as_tensor(sim_all)
    if sim_all.ndim != 2 or sim_all.shape[0] != sim_all.shape[1]:
        raise ContractError(f"sim_all must be square [B, B], got {sim_all.shape}")
    B = sim_all.shape[0]
    if B < 2:
        raise ContractError("InfoNCE needs at least one negative: B >= 2")
    if sim_pos.shape != (B,):
        raise ContractError(f"sim_pos must have shape ({B},), got {sim_pos.shape}")
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if not np.allclose(np.diagonal(sim_all.data), sim_pos.data, atol=1e-8):
        raise ContractError(
            "sim_all diagonal must carry the positive similarities from sim_pos"
        )
    logits = sim_all / tau
    per_sample = logits.logsumexp(axis=1) - sim_pos / tau
    return per_sample.mean()


def offset_equivalence_gap(sim: SimilarityMatrix) -> float:
    """Max |(-log p_match) - shifted-softmax cross-entropy| over the batch.

    The two sides are evaluated through independent code paths: the left
    through :func:`match_probability`, the right as a softmax cross-entropy
    whose positive logit carries a log(B-1) offset, computed directly in
    numpy. The identity says they agree exactly.
    """
    B = sim.B
    lhs = -match_probability(sim).log_p_match.data

    s = np.asarray(sim.S.data, dtype=np.float64) / sim.tau
    off = ~np.eye(B, dtype=bool)
    shifted_pos = np.diagonal(s) + math.log(B - 1)
    negatives = s[off].reshape(B, B - 1)
    logits = np.concatenate([shifted_pos[:, None], negatives], axis=1)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    rhs = lse - shifted_pos

    return float(np.max(np.abs(lhs - rhs)))


def hoeffding_bound(tau: float, B: int, epsilon: float) -> float:
    """Concentration bound for the in-batch mean of exponentiated similarities.

    With cosine similarity the summands live in [e^{-1/tau}, e^{1/tau}], so the
    deviation probability is at most
    2 exp(-2 (B-1) eps^2 / (e^{1/tau} - e^{-1/tau})^2).
    """
    if B < 2:
        raise ContractError("bound needs B >= 2")
    if epsilon <= 0 or tau <= 0:
        raise ContractError("epsilon and tau must be positive")
    span = math.exp(1.0 / tau) - math.exp(-1.0 / tau)
    return 2.0 * math.exp(-2.0 * (B - 1) * epsilon**2 / span**2)
