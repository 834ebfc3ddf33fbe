import numpy as np
import pytest
import torch

from fewgan.generators import Decoder, Encoder, upsample
from fewgan.quantizer import quantize

import oracles
from conftest import make_model


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestUpsample:

    def test_identity(self):
        x = torch.randn(1, 3, 5, 7)
        assert torch.equal(upsample(x, (5, 7)), x)

    def test_constant(self):
        x = torch.full((1, 3, 4, 4), 0.3)
        assert torch.allclose(upsample(x, (9, 11)), torch.full((1, 3, 9, 11), 0.3))

    def test_corner_aligned_middle_column(self):
        x = torch.tensor([[0.0, 1.0], [0.0, 1.0]]).view(1, 1, 2, 2)
        out = upsample(x, (2, 3))
        assert out[0, 0, :, 1].tolist() == [0.5, 0.5]
        assert out[0, 0, :, 0].tolist() == [0.0, 0.0]
        assert out[0, 0, :, 2].tolist() == [1.0, 1.0]

    def test_matches_bilinear_oracle(self):
        img = torch.randn(5, 6, dtype=torch.float64)
        out = upsample(img.view(1, 1, 5, 6), (9, 13))[0, 0]
        ref = oracles.bilinear_corner_aligned(img.numpy(), 9, 13)
        np.testing.assert_allclose(out.numpy(), ref, atol=1e-12)

    def test_rejects_downsampling(self):
        with pytest.raises(ValueError):
            upsample(torch.zeros(1, 3, 4, 4), (3, 5))


class TestEncoder:

    def test_shape_and_fully_convolutional(self):
        enc = Encoder(n_z=5, channels=8)
        assert enc(torch.randn(1, 3, 16, 24)).shape == (1, 5, 4, 6)
        assert enc(torch.randn(1, 3, 16, 48)).shape == (1, 5, 4, 12)

    def test_shift_equivariance_interior(self):
        torch.manual_seed(0)
        enc = Encoder(n_z=4, channels=8).double()
        x = torch.randn(1, 3, 32, 40, dtype=torch.float64)
        shifted = torch.roll(x, shifts=4, dims=-1)
        a = enc(x)
        b = enc(shifted)
        # Latent column c of the shifted input sees input column c - 1.
        torch.testing.assert_close(b[..., 2:-2, 3:-2], a[..., 2:-2, 2:-3])

    def test_zero_weights_constant(self):
        enc = Encoder(n_z=3, channels=8)
        _zero(enc)
        out = enc(torch.randn(2, 3, 16, 16))
        assert torch.all(out == out.flatten()[0])

    def test_too_small(self):
        with pytest.raises(ValueError):
            Encoder(3)(torch.zeros(1, 3, 3, 8))


class TestScale0:

    def test_shapes_and_indices(self):
        model = make_model(sizes=((16, 20),))
        x = torch.rand(2, 3, 16, 20) * 2 - 1
        x_hat, z_e, z_q, idx = model.scale0_forward(x)
        assert x_hat.shape == x.shape
        assert z_e.shape == z_q.shape == (2, model.codebook.dim, 4, 5)
        assert idx.shape == (2, 4, 5)
        assert idx.min() >= 0 and idx.max() < model.codebook.n_embeddings
        assert x_hat.abs().max() <= 1

    def test_odd_resolution(self):
        model = make_model(sizes=((21, 27),))
        x_hat = model.scale0_forward(torch.zeros(1, 3, 21, 27))[0]
        assert x_hat.shape == (1, 3, 21, 27)
        assert model.latent_size() == model.tokenize(torch.zeros(1, 3, 21, 27)).shape[1:]

    def test_single_entry_forces_quantization(self):
        model = make_model(n_embeddings=1)
        _, _, z_q, idx = model.scale0_forward(torch.randn(1, 3, 16, 16))
        assert torch.all(idx == 0)
        assert torch.all(z_q == model.codebook.entries[0].view(1, -1, 1, 1))

    def test_wrong_resolution(self):
        model = make_model()
        with pytest.raises(ValueError):
            model.scale0_forward(torch.zeros(1, 3, 20, 16))

    def test_straight_through_gradient_reaches_encoder(self):
        model = make_model()
        x_hat, *_ = model.scale0_forward(torch.randn(1, 3, 16, 16))
        x_hat.sum().backward()
        assert model.encoder.net[0].weight.grad.abs().sum() > 0


class TestDecodeFromIndices:

    def test_path_equivalence(self):
        model = make_model(sizes=((16, 16), (22, 22)))
        x = torch.randn(2, 3, 16, 16)
        with torch.no_grad():
            x_hat, _, _, idx = model.scale0_forward(x)
            assert torch.equal(model.decode_from_indices(idx), x_hat)

    def test_constant_grid(self):
        model = make_model()
        idx = torch.full((1, 4, 4), 2)
        with torch.no_grad():
            out = model.decode_from_indices(idx)
            ref = model.decoder(
                model.codebook.entries[2].view(1, -1, 1, 1).expand(1, -1, 4, 4),
                (16, 16))
        torch.testing.assert_close(out, ref, rtol=1e-6, atol=1e-7)

    def test_single_cell(self):
        model = make_model()
        z = model.codebook.lookup(torch.zeros(1, 1, 1, dtype=torch.long))
        assert model.decoder(z).shape == (1, 3, 4, 4)

    def test_out_of_range(self):
        model = make_model()
        with pytest.raises(ValueError):
            model.decode_from_indices(torch.full((1, 4, 4), 8))


class TestResidual:

    def test_zero_output_layer_is_upsample(self, tiny_model):
        x = torch.rand(1, 3, 16, 16) * 2 - 1
        with torch.no_grad():
            assert torch.equal(tiny_model.residual_forward(x, 1), upsample(x, (21, 21)))

    def test_shape_and_determinism(self, tiny_model):
        with torch.no_grad():
            for p in tiny_model.generators[1].parameters():
                p.copy_(torch.randn_like(p) * 0.1)
            x = torch.rand(1, 3, 21, 21) * 2 - 1
            a = tiny_model.residual_forward(x, 2)
            b = tiny_model.residual_forward(x, 2)
        assert a.shape == (1, 3, 28, 28)
        assert torch.equal(a, b)

    @pytest.mark.parametrize("t", [0, 3])
    def test_scale_out_of_range(self, tiny_model, t):
        with pytest.raises(ValueError):
            tiny_model.residual_forward(torch.zeros(1, 3, 16, 16), t)


class TestDiscriminate:

    def test_same_spatial_shape(self, tiny_model):
        for t, size in enumerate(tiny_model.sizes):
            out = tiny_model.discriminate(torch.zeros(2, 3, *size), t)
            assert out.shape == (2, 1, *size)

    def test_zero_weights(self, tiny_model):
        _zero(tiny_model.critics[1])
        out = tiny_model.discriminate(torch.randn(1, 3, 21, 21), 1)
        assert torch.all(out == 0)

    def test_resolution_mismatch(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.discriminate(torch.zeros(1, 3, 16, 16), 1)

    def test_receptive_field(self, tiny_model):
        assert all(spec.receptive_field == 11 for spec in tiny_model.specs)
        critic = tiny_model.critics[2].double()
        x = torch.zeros(1, 3, 28, 28, dtype=torch.float64, requires_grad=True)
        critic(x)[0, 0, 14, 14].backward()
        rows, cols = torch.nonzero(x.grad.abs().sum(1)[0], as_tuple=True)
        assert rows.max() - rows.min() + 1 <= 11
        assert cols.max() - cols.min() + 1 <= 11


class TestFullForward:

    def test_no_residual_scales(self):
        model = make_model()
        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(model.full_forward(x), model.scale0_forward(x)[0])

    def test_zeroed_generators_iterate_upsample(self, tiny_model):
        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            expected = tiny_model.scale0_forward(x)[0]
            for size in tiny_model.sizes[1:]:
                expected = upsample(expected, size)
            assert torch.equal(tiny_model.full_forward(x), expected)

    def test_indices_input(self, tiny_model):
        idx = torch.randint(0, 8, (1, 4, 4))
        with torch.no_grad():
            out = tiny_model.full_forward(indices=idx)
        assert out.shape == (1, 3, 28, 28) and torch.isfinite(out).all()

    def test_requires_one_input(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.full_forward()

    def test_sizes_must_increase(self):
        with pytest.raises(ValueError):
            make_model(sizes=((16, 16), (16, 20)))
