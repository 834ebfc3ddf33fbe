import pytest
import torch

from fewgan import manipulate
from fewgan import prior as prior_lib
from fewgan.prior import PixelCNNPrior

from conftest import make_model
from synth import landscape


def random_prior(k=8, seed=0):
    """An untrained prior with a randomized head, so it is far from uniform."""
    torch.manual_seed(seed)
    prior = PixelCNNPrior(k, channels=16, n_blocks=2)
    with torch.no_grad():
        for p in prior.head[-1].parameters():
            p.normal_(0, 0.3)
    return prior.eval()


@pytest.fixture(scope="module")
def setup():
    model = make_model(sizes=((16, 16), (21, 21)))
    with torch.no_grad():
        for p in model.generators[0].output_layer.parameters():
            p.normal_(0, 0.05)
    return model, random_prior()


class TestUnconditional:

    def test_seeded_and_in_range(self, setup):
        model, prior = setup
        a = manipulate.generate_unconditional(model, prior, seed=4)
        b = manipulate.generate_unconditional(model, prior, seed=4)
        assert a.shape == (3, 21, 21)
        assert torch.equal(a, b)
        assert torch.isfinite(a).all() and a.min() >= -1 and a.max() <= 1

    def test_argmax_matches_full_forward(self, setup):
        model, prior = setup
        grid = prior_lib.sample(prior, model.latent_size(), argmax=True)
        out = manipulate.generate_unconditional(model, prior, argmax=True)
        with torch.no_grad():
            expected = model.full_forward(indices=grid[None])[0]
        assert torch.equal(out, expected)

    def test_needs_prior(self, setup):
        with pytest.raises(RuntimeError):
            manipulate.generate_unconditional(setup[0], None)


class TestConditional:

    def test_render_is_full_forward(self, setup):
        model, _ = setup
        x = landscape(3, 16)
        with torch.no_grad():
            expected = model.full_forward(x[None])[0]
        assert torch.equal(manipulate.render_conditional(model, x), expected)

    def test_resizes_input(self, setup):
        model, _ = setup
        out = manipulate.render_conditional(model, landscape(3, 40))
        assert out.shape == (3, 21, 21)

    def test_batched(self, setup):
        model, _ = setup
        x = torch.stack([landscape(3, 16), landscape(4, 16)])
        assert manipulate.render_conditional(model, x).shape == (2, 3, 21, 21)


class TestTokenMask:

    def test_any_occluded_pixel_hides_token(self):
        mask = torch.zeros(16, 16, dtype=torch.bool)
        mask[5, 9] = True
        observed = manipulate.token_mask(mask, (4, 4))
        assert observed.sum() == 15 and not observed[1, 2]

    def test_empty_and_full(self):
        assert manipulate.token_mask(torch.zeros(8, 8), (4, 4)).all()
        assert not manipulate.token_mask(torch.ones(8, 8), (4, 4)).any()


class TestInpaint:

    def test_observed_tokens_pass_through(self, setup):
        model, prior = setup
        gen = torch.Generator().manual_seed(0)
        x = landscape(7, 16)
        for k in range(50):
            mask = torch.rand(16, 16, generator=gen) < 0.1 * (k % 10) / 2
            out, plain, filled = manipulate.inpaint(model, prior, x, mask, seed=k,
                                                    return_grids=True)
            observed = manipulate.token_mask(mask, tuple(plain.shape))
            assert torch.equal(plain[observed], filled[observed])
            assert out.shape == (3, 21, 21)

    def test_distinct_completions(self, setup):
        model, prior = setup
        x = landscape(7, 16)
        mask = torch.zeros(16, 16, dtype=torch.bool)
        mask[8:] = True
        fills = {tuple(manipulate.inpaint(model, prior, x, mask, seed=s,
                                          return_grids=True)[2].flatten().tolist())
                 for s in range(20)}
        assert len(fills) >= 2

    def test_seeded(self, setup):
        model, prior = setup
        x = landscape(7, 16)
        mask = torch.ones(16, 16, dtype=torch.bool)
        a = manipulate.inpaint(model, prior, x, mask, seed=2)
        assert torch.equal(a, manipulate.inpaint(model, prior, x, mask, seed=2))

    def test_empty_mask_is_render(self, setup):
        model, prior = setup
        x = landscape(7, 16)
        out = manipulate.inpaint(model, prior, x, torch.zeros(16, 16, dtype=torch.bool))
        torch.testing.assert_close(out, manipulate.render_conditional(model, x),
                                   rtol=0, atol=1e-6)

    def test_mask_shape_mismatch(self, setup):
        model, prior = setup
        with pytest.raises(ValueError):
            manipulate.inpaint(model, prior, landscape(7, 16), torch.zeros(8, 8))


class TestRequest:

    def test_dispatch(self, setup):
        model, prior = setup
        x = landscape(2, 16)
        for mode in ("conditional", "edit", "harmonize"):
            req = manipulate.ManipulationRequest(mode, image=x)
            assert torch.equal(manipulate.run(model, prior, req),
                               manipulate.render_conditional(model, x))
        out = manipulate.run(model, prior, manipulate.ManipulationRequest("unconditional", seed=1))
        assert torch.equal(out, manipulate.generate_unconditional(model, prior, seed=1))

    @pytest.mark.parametrize("kwargs", [dict(mode="paint"), dict(mode="edit"),
                                        dict(mode="inpaint", image=torch.zeros(3, 4, 4))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            manipulate.ManipulationRequest(**kwargs)
