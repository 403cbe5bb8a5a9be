"""Encoder and decoder MLPs behind a uniform interface.

The decoder exposes its penultimate hidden state on every forward pass; that
tensor, taken at the deterministic mean latent, is the informative embedding.
Bundles tie encoder, decoder, objective tag, and hyperparameters together and
serialize to a single checkpoint file with a bit-exact round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .distributions import GaussianCode, reparameterized_sample
from .errors import ContractError, NumericsError, UnsupportedOperation
from .numcore import Tensor, as_tensor, glorot_uniform, no_grad

OBJECTIVES = ("mim", "cmim", "vae", "cvae", "infonce")

CHECKPOINT_VERSION = 1

# Temperature defaults: 0.1 for image-scale experiments, 1.0 for the 2-D toy.
DEFAULT_TAU_IMAGES = 0.1
DEFAULT_TAU_TOY = 1.0


class Linear:
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int,
                 dtype, name: str):
        self.W = Tensor(glorot_uniform(rng, fan_in, fan_out, dtype=dtype),
                        requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(fan_out, dtype=dtype),
                        requires_grad=True, name=f"{name}.b")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.W) + self.b

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


def _check_finite(t: Tensor, where: str) -> Tensor:
    # cheap reduction first; the elementwise scan only confirms real failures
    if not np.isfinite(t.data.sum()) and not np.all(np.isfinite(t.data)):
        raise NumericsError(f"{where} produced non-finite activations")
    return t


class EncoderNet:
    """MLP trunk with shared mean and log-variance heads."""

    def __init__(self, rng, input_dim: int, hidden: tuple[int, ...],
                 latent_dim: int, dtype):
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.latent_dim = latent_dim
        self.trunk = []
        fan_in = input_dim
        for i, width in enumerate(self.hidden):
            self.trunk.append(Linear(rng, fan_in, width, dtype, f"enc.trunk{i}"))
            fan_in = width
        self.mean_head = Linear(rng, fan_in, latent_dim, dtype, "enc.mean")
        self.log_var_head = Linear(rng, fan_in, latent_dim, dtype, "enc.log_var")

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x
        for i, layer in enumerate(self.trunk):
            h = _check_finite(layer(h).tanh(), f"encoder layer {i}")
        mean = _check_finite(self.mean_head(h), "encoder mean head")
        log_var = _check_finite(self.log_var_head(h), "encoder log-var head")
        return mean, log_var

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.trunk:
            out.extend(layer.parameters())
        out.extend(self.mean_head.parameters())
        out.extend(self.log_var_head.parameters())
        return out


class DecoderNet:
    """MLP from latent to pixel logits; keeps the tensor feeding the last layer."""

    def __init__(self, rng, latent_dim: int, hidden: tuple[int, ...],
                 output_dim: int, dtype):
        self.latent_dim = latent_dim
        self.hidden = tuple(hidden)
        self.output_dim = output_dim
        self.trunk = []
        fan_in = latent_dim
        for i, width in enumerate(self.hidden):
            self.trunk.append(Linear(rng, fan_in, width, dtype, f"dec.trunk{i}"))
            fan_in = width
        self.out = Linear(rng, fan_in, output_dim, dtype, "dec.out")

    @property
    def hidden_dim(self) -> int:
        return self.hidden[-1]

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        h = z
        for i, layer in enumerate(self.trunk):
            h = _check_finite(layer(h).tanh(), f"decoder layer {i}")
        logits = _check_finite(self.out(h), "decoder output head")
        return logits, h

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.trunk:
            out.extend(layer.parameters())
        out.extend(self.out.parameters())
        return out


@dataclass
class ModelBundle:
    """Encoder + decoder + objective tag; the unit of training and checkpointing."""

    objective: str
    encoder: EncoderNet
    decoder: DecoderNet | None
    tau: float
    latent_dim: int
    input_dim: int
    hidden: tuple[int, ...]
    seed: int
    dtype: str = "float64"
    step: int = 0
    val_loss: float | None = None
    extra: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters()
        if self.decoder is not None:
            params.extend(self.decoder.parameters())
        return params

    @property
    def embedding_dim(self) -> int:
        if self.decoder is None:
            raise UnsupportedOperation(
                f"{self.objective} bundles carry no decoder and no informative embeddings"
            )
        return self.decoder.hidden_dim


def build_bundle(objective: str, *, input_dim: int = 784,
                 hidden: tuple[int, ...] = (400, 400), latent_dim: int = 64,
                 tau: float = DEFAULT_TAU_IMAGES, seed: int = 0,
                 dtype: str = "float64") -> ModelBundle:
    if objective not in OBJECTIVES:
        raise ContractError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    np_dtype = np.dtype(dtype)
    if np_dtype not in (np.float32, np.float64):
        raise ContractError(f"dtype must be float32 or float64, got {dtype}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D0DE1]))
    encoder = EncoderNet(rng, input_dim, hidden, latent_dim, np_dtype)
    decoder = None
    if objective != "infonce":
        decoder = DecoderNet(rng, latent_dim, tuple(reversed(hidden)), input_dim, np_dtype)
    return ModelBundle(
        objective=objective, encoder=encoder, decoder=decoder, tau=tau,
        latent_dim=latent_dim, input_dim=input_dim, hidden=tuple(hidden),
        seed=seed, dtype=str(np_dtype),
    )


def _prepare_input(bundle: ModelBundle, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != bundle.input_dim:
        raise ContractError(
            f"input shape {x.shape} does not match [B, {bundle.input_dim}]"
        )
    if x.data.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
        raise ContractError("inputs must lie in [0, 1]; binarize or rescale upstream")
    if x.dtype != np.dtype(bundle.dtype):
        x = Tensor(x.data.astype(bundle.dtype))
    return x


def encode(bundle: ModelBundle, x, rng: np.random.Generator) -> GaussianCode:
    """Gaussian latent parameters plus one reparameterized sample for ``x``."""
    x = _prepare_input(bundle, x)
    mean, log_var = bundle.encoder.forward(x)
    return reparameterized_sample(mean, log_var, rng)


def decode(bundle: ModelBundle, z) -> tuple[Tensor, Tensor]:
    """Pixel logits and the penultimate hidden state, from one forward pass."""
    if bundle.decoder is None:
        raise UnsupportedOperation(f"{bundle.objective} bundle has no decoder")
    z = as_tensor(z)
    if not np.all(np.isfinite(z.data)):
        raise ContractError("decode requires finite latents")
    return bundle.decoder.forward(z)


def mean_embedding(bundle: ModelBundle, x) -> Tensor:
    """Encoder mean head, no sampling; the standard embedding."""
    with no_grad():
        x = _prepare_input(bundle, x)
        mean, _ = bundle.encoder.forward(x)
    return mean


def informative_embedding(bundle: ModelBundle, x) -> Tensor:
    """Decoder hidden state at the mean latent; no sampling, no pooling.

    Image decoding is not autoregressive, so the hidden state just before the
    logit layer is used directly.
    """
    if bundle.decoder is None:
        raise UnsupportedOperation(
            f"{bundle.objective} bundle has no decoder to extract embeddings from"
        )
    with no_grad():
        x = _prepare_input(bundle, x)
        mean, _ = bundle.encoder.forward(x)
        _, h = bundle.decoder.forward(mean)
    return h


# -- checkpointing ---------------------------------------------------------------


def _named_parameters(bundle: ModelBundle) -> list[tuple[str, Tensor]]:
    return [(p.name, p) for p in bundle.parameters()]


def save_checkpoint(bundle: ModelBundle, path) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "objective": bundle.objective,
        "tau": bundle.tau,
        "latent_dim": bundle.latent_dim,
        "input_dim": bundle.input_dim,
        "hidden": list(bundle.hidden),
        "seed": bundle.seed,
        "dtype": bundle.dtype,
        "step": bundle.step,
        "val_loss": bundle.val_loss,
        "extra": bundle.extra,
    }
    arrays = {f"param/{name}": p.data for name, p in _named_parameters(bundle)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> ModelBundle:
    with np.load(path, allow_pickle=False) as packed:
        meta = json.loads(str(packed["__meta__"][()]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(
                f"checkpoint format {meta.get('format_version')} "
                f"!= supported {CHECKPOINT_VERSION}"
            )
        bundle = build_bundle(
            meta["objective"], input_dim=meta["input_dim"],
            hidden=tuple(meta["hidden"]), latent_dim=meta["latent_dim"],
            tau=meta["tau"], seed=meta["seed"], dtype=meta["dtype"],
        )
        bundle.step = meta["step"]
        bundle.val_loss = meta["val_loss"]
        bundle.extra = meta.get("extra", {})
        for name, p in _named_parameters(bundle):
            stored = packed[f"param/{name}"]
            if stored.shape != p.data.shape:
                raise ContractError(
                    f"checkpoint parameter {name} has shape {stored.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = stored
    return bundle
