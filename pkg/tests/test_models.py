"""Encoder/decoder networks, embeddings, and checkpointing."""

import numpy as np
import pytest

from cmim.errors import ContractError, UnsupportedOperation
from cmim.models import (
    build_bundle,
    decode,
    encode,
    informative_embedding,
    load_checkpoint,
    mean_embedding,
    save_checkpoint,
)
from cmim.numcore import Tensor, adam_init, adam_step, zero_grads
from cmim.objectives import mim_loss
from conftest import check_parameter_grads


@pytest.fixture
def small_bundle():
    return build_bundle("cmim", input_dim=12, hidden=(10, 8), latent_dim=4,
                        tau=0.5, seed=3)


@pytest.fixture
def x_small(rng):
    return (rng.random((5, 12)) > 0.5).astype(float)


class TestEncode:
    def test_deterministic_given_seed(self, small_bundle, x_small):
        z1 = encode(small_bundle, x_small, np.random.default_rng(9)).z.data
        z2 = encode(small_bundle, x_small, np.random.default_rng(9)).z.data
        assert z1.tobytes() == z2.tobytes()

    def test_output_shapes(self, small_bundle, x_small):
        code = encode(small_bundle, x_small, np.random.default_rng(0))
        for t in (code.mean, code.log_var, code.z):
            assert t.shape == (5, 4)

    def test_rejects_out_of_range_inputs(self, small_bundle):
        with pytest.raises(ContractError, match=r"\[0, 1\]"):
            encode(small_bundle, np.full((2, 12), 1.5), np.random.default_rng(0))

    def test_rejects_wrong_width(self, small_bundle):
        with pytest.raises(ContractError):
            encode(small_bundle, np.zeros((2, 11)), np.random.default_rng(0))

    def test_gradient_through_first_layer(self, small_bundle, x_small):
        params = small_bundle.parameters()

        def make_loss():
            rng = np.random.default_rng(17)
            code = encode(small_bundle, x_small, rng)
            return (code.z * code.z).sum() + code.log_var.sum()

        assert check_parameter_grads(make_loss, params[:2]) < 1e-4


class TestDecode:
    def test_same_z_same_outputs(self, small_bundle, rng):
        z = rng.standard_normal((4, 4))
        logits1, h1 = decode(small_bundle, z)
        logits2, h2 = decode(small_bundle, z)
        assert logits1.data.tobytes() == logits2.data.tobytes()
        assert h1.data.tobytes() == h2.data.tobytes()

    def test_hidden_shape(self, small_bundle, rng):
        _, h = decode(small_bundle, rng.standard_normal((4, 4)))
        assert h.shape == (4, 10)  # last decoder trunk width (reversed hidden)

    def test_logits_recompose_from_final_layer(self, small_bundle, rng):
        z = rng.standard_normal((6, 4))
        logits, h = decode(small_bundle, z)
        out = small_bundle.decoder.out
        rebuilt = h.data @ out.W.data + out.b.data
        assert rebuilt.tobytes() == logits.data.tobytes()

    def test_rejects_non_finite_latents(self, small_bundle):
        z = np.zeros((2, 4))
        z[0, 0] = np.inf
        with pytest.raises(ContractError):
            decode(small_bundle, z)

    def test_infonce_has_no_decoder(self):
        bundle = build_bundle("infonce", input_dim=12, hidden=(10, 8), latent_dim=4)
        with pytest.raises(UnsupportedOperation):
            decode(bundle, np.zeros((2, 4)))


class TestEmbeddings:
    def test_identical_inputs_identical_embeddings(self, small_bundle):
        x = np.tile((np.random.default_rng(1).random(12) > 0.5).astype(float), (3, 1))
        h = informative_embedding(small_bundle, x).data
        assert np.array_equal(h[0], h[1]) and np.array_equal(h[1], h[2])

    def test_embedding_dim_independent_of_latent_dim(self):
        for latent in (2, 4, 7):
            bundle = build_bundle("mim", input_dim=12, hidden=(10, 8), latent_dim=latent)
            h = informative_embedding(bundle, np.zeros((2, 12)))
            assert h.shape == (2, 10)

    def test_mean_embedding_equals_encode_mean(self, small_bundle, x_small):
        mean = mean_embedding(small_bundle, x_small)
        code = encode(small_bundle, x_small, np.random.default_rng(0))
        assert mean.data.tobytes() == code.mean.data.tobytes()
        assert mean.shape == (5, 4)

    def test_embeddings_seed_independent(self, small_bundle, x_small):
        a = informative_embedding(small_bundle, x_small).data
        b = informative_embedding(small_bundle, x_small).data
        assert a.tobytes() == b.tobytes()

    def test_infonce_bundle_unsupported(self, x_small):
        bundle = build_bundle("infonce", input_dim=12, hidden=(10, 8), latent_dim=4)
        with pytest.raises(UnsupportedOperation):
            informative_embedding(bundle, x_small)

    def test_trained_autoencoder_separates_two_points(self):
        # near-zero reconstruction loss on 2 points -> distinct embeddings
        rng = np.random.default_rng(0)
        x = np.zeros((2, 8))
        x[0, :4] = 1.0
        x[1, 4:] = 1.0
        bundle = build_bundle("mim", input_dim=8, hidden=(16,), latent_dim=2,
                              tau=1.0, seed=0)
        params = bundle.parameters()
        state = adam_init(params, lr=5e-3)
        noise = np.random.default_rng(4)
        for _ in range(1500):
            breakdown = mim_loss(bundle, Tensor(x), noise)
            zero_grads(params)
            breakdown.total.backward()
            adam_step(params, [p.grad for p in params], state)
        assert breakdown.reconstruction < 0.4  # close to a perfect autoencoder
        h = informative_embedding(bundle, x).data
        assert np.linalg.norm(h[0] - h[1]) > 0.0


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, small_bundle):
        small_bundle.step = 123
        small_bundle.val_loss = 4.5
        small_bundle.extra = {"batch_size": 10, "dataset": "unit"}
        path = tmp_path / "ckpt.npz"
        save_checkpoint(small_bundle, path)
        loaded = load_checkpoint(path)
        originals = {p.name: p.data for p in small_bundle.parameters()}
        for p in loaded.parameters():
            assert p.data.tobytes() == originals[p.name].tobytes()
            assert p.data.dtype == originals[p.name].dtype
        assert loaded.step == 123
        assert loaded.val_loss == 4.5
        assert loaded.objective == "cmim"
        assert loaded.tau == 0.5
        assert loaded.extra["batch_size"] == 10

    def test_round_trip_preserves_forward(self, tmp_path, small_bundle, x_small):
        path = tmp_path / "ckpt.npz"
        save_checkpoint(small_bundle, path)
        loaded = load_checkpoint(path)
        a = mean_embedding(small_bundle, x_small).data
        b = mean_embedding(loaded, x_small).data
        assert a.tobytes() == b.tobytes()

    def test_infonce_round_trip(self, tmp_path):
        bundle = build_bundle("infonce", input_dim=6, hidden=(5,), latent_dim=3,
                              dtype="float32")
        path = tmp_path / "enc.npz"
        save_checkpoint(bundle, path)
        loaded = load_checkpoint(path)
        assert loaded.decoder is None
        assert loaded.dtype == "float32"


def test_build_bundle_rejects_unknown_objective():
    with pytest.raises(ContractError):
        build_bundle("simclr")


def test_bundles_with_same_seed_identical():
    a = build_bundle("cmim", input_dim=12, hidden=(10, 8), latent_dim=4, seed=5)
    b = build_bundle("cmim", input_dim=12, hidden=(10, 8), latent_dim=4, seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
