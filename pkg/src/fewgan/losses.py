"""Training objectives.

Critic expectations are means over the critic's score map and the batch.
"""

from dataclasses import dataclass

import torch
from torch.nn import functional as F


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_adv_ref: float = 1.0
    w_ssim: float = 1.0
    w_rec: float = 1.0
    w_vq: float = 1.0
    w_cont: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            value = float(value)
            if not value >= 0 or value == float("inf"):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
            setattr(self, name, value)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample_score(scores):
    return scores.reshape(scores.shape[0], -1).mean(dim=1)


def gradient_penalty(critic, real, fake, eps=None, generator=None):
    """Mean of ``(||grad D(x_bar)|| - 1)^2`` over interpolates ``x_bar``.

    ``D`` here is the per-sample mean of the critic's score map, and
    ``x_bar = eps * real + (1 - eps) * fake`` with one ``eps ~ U[0, 1]`` per
    batch element unless ``eps`` is given.
    """
    _check_shapes(real, fake)
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype,
                         device=real.device)
    eps = torch.as_tensor(eps, dtype=real.dtype, device=real.device)
    eps = eps.reshape(-1, *([1] * (real.dim() - 1)))
    x_bar = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    score = _per_sample_score(critic(x_bar))
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score.sum(), x_bar, create_graph=True,
                                      allow_unused=True)
    else:
        grad = None
    if grad is None:
        # Critic output does not depend on its input.
        grad = torch.zeros_like(x_bar)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return torch.mean((norms - 1) ** 2)


def adv_critic_loss(critic, real, fake, lambda_gp, eps=None, generator=None):
    """WGAN-GP critic objective, minimized by the critic."""
    _check_shapes(real, fake)
    fake = fake.detach()
    wasserstein = -critic(real).mean() + critic(fake).mean()
    return wasserstein + lambda_gp * gradient_penalty(critic, real, fake, eps, generator)


def adv_generator_loss(critic, fake):
    return -critic(fake).mean()


def adv_ref_loss(critic, s_hat):
    """Generator-only adversarial term for side-dataset renders.

    The critic gets no training signal from side images; callers must keep
    its parameters out of the optimizer step that consumes this loss.
    """
    return -critic(s_hat).mean()


def _gaussian_window(size=11, sigma=1.5, dtype=None, device=None):
    coords = torch.arange(size, dtype=dtype or torch.get_default_dtype(),
                          device=device) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window_size=11, sigma=1.5):
    """Mean SSIM of images in ``[-1, 1]`` (remapped to ``[0, 1]``).

    Statistics use a separable Gaussian window with edge-replicated borders,
    computed per channel and averaged over channels, positions and batch.
    """
    _check_shapes(a, b)
    a = (a + 1) / 2
    b = (b + 1) / 2
    c = a.shape[1]
    g = _gaussian_window(window_size, sigma, a.dtype, a.device)
    kx = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    pad = window_size // 2

    def blur(x):
        x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
        x = F.conv2d(x, kx, groups=c)
        return F.conv2d(x, ky, groups=c)

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def ssim_loss(a, b):
    return 1 - ssim(a, b)


def continuity_loss(m):
    """L1 spatial continuity of a grid ``(C, H, W)`` or ``(B, C, H, W)``.

    Sums ``|m[i+1, j] - m[i, j]| + |m[i, j+1] - m[i, j]|`` over columns
    ``i < W - 1`` and rows ``j < H - 1`` only; the cross pairs along the last
    row and column are outside the sum. Summed over channels and batch.
    """
    if m.dim() == 3:
        m = m.unsqueeze(0)
    h, w = m.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"continuity loss needs a grid of at least 2x2, got {h}x{w}")
    base = m[..., : h - 1, : w - 1]
    right = m[..., : h - 1, 1:]
    down = m[..., 1:, : w - 1]
    return (right - base).abs().sum() + (down - base).abs().sum()


def reconstruction_loss(x, x_hat):
    _check_shapes(x, x_hat)
    return torch.mean((x - x_hat) ** 2)


def scale_t_loss(adv, adv_ref, ssim_term, rec, weights=None):
    """Weighted objective of a residual scale."""
    w = weights or LossWeights()
    return w.w_adv * adv + w.w_adv_ref * adv_ref + w.w_ssim * ssim_term + w.w_rec * rec


def scale_0_loss(adv, vq, adv_ref, ssim_term, continuity, weights=None):
    """Weighted objective of the quantized scale.

    ``continuity`` is expected to already hold the sum over the encodings of
    the training batch and the side image.
    """
    w = weights or LossWeights()
    return (w.w_adv * adv + w.w_vq * vq + w.w_adv_ref * adv_ref
            + w.w_ssim * ssim_term + w.w_cont * continuity)
