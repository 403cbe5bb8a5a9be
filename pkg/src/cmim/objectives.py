"""The five training objectives and the training loop.

MIM here is the asymmetric variant: latents are sampled from the encoding
path only, and the loss scores the reconstruction plus half the sum of the
encoder log-density and the fixed-prior log-density at the sample. cMIM adds
the mean-denominator discriminator term over the batch's latents; VAE is the
standard ELBO with a closed-form KL; cVAE is VAE plus the same contrastive
term; InfoNCE trains the encoder alone on two independent samples per input.

The contrastive variants are built literally as base-objective-plus-term so
the decomposition identities hold at the bit level on shared seeds.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .contrastive import cosine_similarity, cosine_sim_matrix, infonce_loss, match_probability
from .data import Dataset, batches, train_val_split
from .distributions import PriorSpec, bernoulli_log_prob, gaussian_log_prob, prior_log_prob
from .errors import ContractError, TrainingDiverged
from .models import ModelBundle, build_bundle, decode, encode
from .numcore import Tensor, WsdSchedule, adam_init, adam_step, no_grad, schedule_lr, zero_grads


@dataclass
class LossBreakdown:
    """Scalar loss plus its signed components; total = sum of active parts."""

    total: Tensor
    reconstruction: float | None = None
    contrastive: float | None = None
    encoder_log_prob: float | None = None
    prior: float | None = None
    kl: float | None = None

    def components(self) -> dict[str, float | None]:
        return {
            "reconstruction": self.reconstruction,
            "contrastive": self.contrastive,
            "encoder_log_prob": self.encoder_log_prob,
            "prior": self.prior,
            "kl": self.kl,
        }


@dataclass
class TrainConfig:
    objective: str
    batch_size: int = 100
    steps: int = 20_000
    lr: float = 1e-3
    tau: float = 0.1
    seed: int = 0
    val_interval: int = 500
    val_fraction: float = 0.10
    dataset_id: str = ""
    input_dim: int = 784
    hidden: tuple[int, ...] = (400, 400)
    latent_dim: int = 64
    dtype: str = "float32"
    binarize: bool = True

    def __post_init__(self):
        if self.objective in ("cmim", "cvae", "infonce") and self.batch_size < 2:
            raise ContractError(
                f"{self.objective} needs at least one in-batch negative: batch_size >= 2"
            )
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def _require_negatives(objective: str, B: int) -> None:
    if B < 2:
        raise ContractError(f"{objective} needs a batch of >= 2, got {B}")


def _autoencoding_terms(bundle: ModelBundle, x, rng):
    """Reconstruction + half-sum terms shared by MIM and cMIM, one op sequence."""
    code = encode(bundle, x, rng)
    logits, _ = decode(bundle, code.z)
    rec = -(bernoulli_log_prob(logits, x).mean())
    enc = -(gaussian_log_prob(code, code.z).mean())
    pri = -(prior_log_prob(PriorSpec(bundle.latent_dim), code.z).mean())
    base = rec + 0.5 * (enc + pri)
    return base, rec, enc, pri, code


def _contrastive_term(z: Tensor, tau: float) -> Tensor:
    sim = cosine_sim_matrix(z, tau)
    return -(match_probability(sim).log_p_match.mean())


def mim_loss(bundle: ModelBundle, x, rng) -> LossBreakdown:
    base, rec, enc, pri, _ = _autoencoding_terms(bundle, x, rng)
    return LossBreakdown(
        total=base,
        reconstruction=rec.item(),
        encoder_log_prob=(0.5 * enc).item(),
        prior=(0.5 * pri).item(),
    )


def cmim_loss(bundle: ModelBundle, x, rng) -> LossBreakdown:
    _require_negatives("cmim", len(x.data if isinstance(x, Tensor) else x))
    base, rec, enc, pri, code = _autoencoding_terms(bundle, x, rng)
    contrast = _contrastive_term(code.z, bundle.tau)
    return LossBreakdown(
        total=base + contrast,
        reconstruction=rec.item(),
        contrastive=contrast.item(),
        encoder_log_prob=(0.5 * enc).item(),
        prior=(0.5 * pri).item(),
    )


def _elbo_terms(bundle: ModelBundle, x, rng):
    code = encode(bundle, x, rng)
    logits, _ = decode(bundle, code.z)
    rec = -(bernoulli_log_prob(logits, x).mean())
    mean, log_var = code.mean, code.log_var
    kl_per_dim = 0.5 * (log_var.exp() + mean * mean - 1.0 - log_var)
    kl = kl_per_dim.sum(axis=1).mean()
    base = rec + kl
    return base, rec, kl, code


def vae_loss(bundle: ModelBundle, x, rng) -> LossBreakdown:
    base, rec, kl, _ = _elbo_terms(bundle, x, rng)
    return LossBreakdown(total=base, reconstruction=rec.item(), kl=kl.item())


def cvae_loss(bundle: ModelBundle, x, rng) -> LossBreakdown:
    _require_negatives("cvae", len(x.data if isinstance(x, Tensor) else x))
    base, rec, kl, code = _elbo_terms(bundle, x, rng)
    contrast = _contrastive_term(code.z, bundle.tau)
    return LossBreakdown(
        total=base + contrast,
        reconstruction=rec.item(),
        contrastive=contrast.item(),
        kl=kl.item(),
    )


def infonce_objective(bundle: ModelBundle, x, rng) -> LossBreakdown:
    """Two independent encoder samples of each input form the positive pair."""
    _require_negatives("infonce", len(x.data if isinstance(x, Tensor) else x))
    code_a = encode(bundle, x, rng)
    code_b = encode(bundle, x, rng)
    sims = cosine_similarity(code_a.z, code_b.z)
    B = sims.shape[0]
    eye = Tensor(np.eye(B, dtype=sims.dtype))
    positives = (sims * eye).sum(axis=1)
    total = infonce_loss(positives, sims, bundle.tau)
    return LossBreakdown(total=total, contrastive=total.item())


LOSS_FUNCTIONS = {
    "mim": mim_loss,
    "cmim": cmim_loss,
    "vae": vae_loss,
    "cvae": cvae_loss,
    "infonce": infonce_objective,
}


@dataclass
class HistoryRecord:
    step: int
    lr: float
    train_total: float
    components: dict = field(default_factory=dict)
    val_loss: float | None = None

    def as_dict(self) -> dict:
        row = {"step": self.step, "lr": self.lr, "train_total": self.train_total,
               "val_loss": self.val_loss}
        row.update({k: v for k, v in self.components.items() if v is not None})
        return row


def _validation_loss(bundle: ModelBundle, loss_fn, val_images: np.ndarray,
                     batch_size: int, rng: np.random.Generator) -> float:
    """Mean loss over the validation set in fixed-size batches (no gradients)."""
    n = len(val_images)
    if n < batch_size:
        chunks = [val_images] if n >= 2 or bundle.objective in ("mim", "vae") else []
    else:
        chunks = [val_images[i:i + batch_size]
                  for i in range(0, n - batch_size + 1, batch_size)]
    if not chunks:
        raise ContractError("validation split too small for this batch size")
    totals = []
    with no_grad():
        for chunk in chunks:
            totals.append(loss_fn(bundle, Tensor(chunk), rng).total.item())
    return float(np.mean(totals))


def train(config: TrainConfig, dataset: Dataset) -> tuple[ModelBundle, list[HistoryRecord]]:
    """Adam + WSD training with lowest-validation-loss checkpoint selection.

    The returned bundle carries the parameters of the best validation step,
    never the last step or any other heuristic pick.
    """
    if config.objective not in LOSS_FUNCTIONS:
        raise ContractError(f"unknown objective {config.objective!r}")
    loss_fn = LOSS_FUNCTIONS[config.objective]

    train_ds, val_ds = train_val_split(dataset, config.val_fraction, config.seed)
    bundle = build_bundle(
        config.objective, input_dim=config.input_dim, hidden=config.hidden,
        latent_dim=config.latent_dim, tau=config.tau, seed=config.seed,
        dtype=config.dtype,
    )
    params = bundle.parameters()
    state = adam_init(params, lr=config.lr)
    sched = WsdSchedule(total_steps=config.steps, peak_lr=config.lr)

    seq = np.random.SeedSequence([config.seed, 0xBA7C4])
    batch_seed, noise_seed = seq.spawn(2)
    noise_rng = np.random.default_rng(noise_seed)
    drop_last = config.objective in ("cmim", "cvae", "infonce")
    stream = batches(train_ds, config.batch_size, seed=batch_seed,
                     binarize=config.binarize, drop_last=drop_last)
    val_images = val_ds.images
    if config.binarize:
        from .data import binarize as _binarize
        val_images = _binarize(val_images)
    val_images = val_images.astype(config.dtype)

    history: list[HistoryRecord] = []
    best_val = math.inf
    best_params: list[np.ndarray] | None = None
    best_step = 0
    last_finite_step = -1

    for step in range(config.steps):
        lr_now = schedule_lr(sched, step)
        x, _ = next(stream)
        breakdown = loss_fn(bundle, Tensor(x.astype(config.dtype)), noise_rng)
        total = breakdown.total.item()
        if not math.isfinite(total):
            raise TrainingDiverged(
                f"loss became non-finite at step {step}; "
                f"last finite step was {last_finite_step}"
            )
        last_finite_step = step
        zero_grads(params)
        breakdown.total.backward()
        adam_step(params, [p.grad for p in params], state, lr_now)

        if (step + 1) % config.val_interval == 0 or step == config.steps - 1:
            val_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, 0x7A1, step])
            )
            val_loss = _validation_loss(bundle, loss_fn, val_images,
                                        config.batch_size, val_rng)
            history.append(HistoryRecord(
                step=step + 1, lr=lr_now, train_total=total,
                components=breakdown.components(), val_loss=val_loss,
            ))
            if val_loss < best_val:
                best_val = val_loss
                best_step = step + 1
                best_params = [p.data.copy() for p in params]

    if best_params is not None:
        for p, saved in zip(params, best_params):
            p.data = saved
        bundle.step = best_step
        bundle.val_loss = best_val
    else:
        bundle.step = config.steps
    bundle.extra = {"dataset": config.dataset_id, "batch_size": config.batch_size,
                    "steps": config.steps, "seed": config.seed}
    return bundle, history
