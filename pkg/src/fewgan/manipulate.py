"""Generation and manipulation with a trained pyramid and prior.

Editing, harmonization and conditional generation all run the same
conditional pass (:func:`render_conditional`) on different inputs.
"""

from dataclasses import dataclass

import torch
from torch.nn import functional as F

from fewgan import data
from fewgan import prior as prior_lib

MODES = ("unconditional", "conditional", "edit", "harmonize", "inpaint")


@dataclass
class ManipulationRequest:
    mode: str
    image: torch.Tensor | None = None
    mask: torch.Tensor | None = None
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "unconditional" and self.image is None:
            raise ValueError(f"mode {self.mode!r} requires an input image")
        if self.mode == "inpaint" and self.mask is None:
            raise ValueError("inpainting requires a mask")


def _require_prior(prior):
    if prior is None:
        raise RuntimeError("this operation needs a trained prior")


def generate_unconditional(model, prior, temperature=1.0, seed=0, argmax=False):
    """Samples a token grid from the prior and renders it at the finest scale.

    Returns:
        ``(3, H_T, W_T)`` image in ``[-1, 1]``.
    """
    _require_prior(prior)
    grid = prior_lib.sample(prior, model.latent_size(), temperature, seed, argmax)
    with torch.no_grad():
        return model.full_forward(indices=grid.unsqueeze(0))[0]


def _to_scale0(model, x):
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if tuple(x.shape[-2:]) != model.sizes[0]:
        x = torch.stack([data.resize(img, model.sizes[0]) for img in x])
    return x


def render_conditional(model, x):
    """Runs the full pyramid on an (edited) image; resized to scale 0 if needed."""
    batched = x.dim() == 4
    with torch.no_grad():
        out = model.full_forward(_to_scale0(model, x))
    return out if batched else out[0]


def token_mask(pixel_mask, grid_size):
    """Downscales a pixel mask (True = occluded) to token observability.

    A token is observed only if none of the pixels it covers is occluded;
    pixels are assigned to tokens by splitting the image into an even
    ``h x w`` grid of cells.

    Returns:
        ``(h, w)`` bool tensor, True where the token is observed.
    """
    occluded = pixel_mask.bool()
    if occluded.dim() == 3:
        occluded = occluded.any(dim=0)
    hit = F.adaptive_max_pool2d(occluded.float()[None, None], grid_size)[0, 0]
    return hit == 0


def inpaint(model, prior, x, pixel_mask, temperature=1.0, seed=0, return_grids=False):
    """Fills the occluded region of ``x`` with the prior, then renders it.

    Args:
        model: Trained pyramid.
        prior: Trained prior over the model's codebook.
        x: ``(3, H, W)`` image.
        pixel_mask: ``(H, W)`` bool tensor, True where pixels are occluded.
        temperature: Sampling temperature of the prior.
        seed: Seed of the fill.
        return_grids: Also return the plain and the filled token grids.
    """
    _require_prior(prior)
    if tuple(pixel_mask.shape[-2:]) != tuple(x.shape[-2:]):
        raise ValueError(
            f"mask shape {tuple(pixel_mask.shape)} does not match image "
            f"{tuple(x.shape)}"
        )
    x0 = _to_scale0(model, x)
    plain = model.tokenize(x0)[0]
    observed = token_mask(pixel_mask, tuple(plain.shape))
    filled = prior_lib.conditional_fill(prior, plain, observed, temperature, seed)
    with torch.no_grad():
        out = model.full_forward(indices=filled.unsqueeze(0))[0]
    if return_grids:
        return out, plain, filled
    return out


def run(model, prior, request):
    """Dispatches a :class:`ManipulationRequest`."""
    if request.mode == "unconditional":
        return generate_unconditional(model, prior, request.temperature, request.seed)
    if request.mode == "inpaint":
        return inpaint(model, prior, request.image, request.mask,
                       request.temperature, request.seed)
    return render_conditional(model, request.image)
