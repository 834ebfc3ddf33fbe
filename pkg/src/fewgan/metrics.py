"""Evaluation metrics: sample diversity, PSNR and SSIM."""

import math

import torch

from fewgan import losses

# PSNR of identical images.
EXACT = math.inf


def diversity(batch, population=True):
    """Mean over pixels and channels of the per-pixel std across the batch.

    Args:
        batch: ``(n, C, H, W)`` tensor (or sequence of equally shaped images)
            with values in ``[0, 1]``.
        population: Use the population (``ddof=0``) standard deviation.
    """
    if not torch.is_tensor(batch):
        shapes = {tuple(img.shape) for img in batch}
        if len(shapes) != 1:
            raise ValueError(f"images must share one shape, got {sorted(shapes)}")
        batch = torch.stack([torch.as_tensor(img) for img in batch])
    if batch.shape[0] < 2:
        raise ValueError("diversity needs at least two images")
    batch = batch.to(torch.float64)
    std = batch.std(dim=0, correction=0 if population else 1)
    return float(std.mean())


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in ``[0, 1]``.

    Returns :data:`EXACT` when the images are identical.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0:
        return EXACT
    return 10 * math.log10(1.0 / mse)


def ssim_metric(a, b):
    """Mean SSIM of images in ``[-1, 1]``; equals ``1 - ssim_loss(a, b)``."""
    return losses.ssim(a, b).item()
