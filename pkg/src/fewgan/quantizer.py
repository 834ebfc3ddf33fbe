"""Position-aware vector quantization of latent grids.

Latent grids are channels-first tensors of shape ``(B, C, h, w)``. Before
quantization the encoder output (``C = n_z``) is augmented with normalized
grid coordinates, each coordinate pair repeated ``lambda_pos`` times, so every
codebook entry carries both content and a location.
"""

import hashlib

import torch
from torch import nn


def _axis_coords(n, dtype=None, device=None):
    if n == 1:
        # Center of the range when the formula would divide by zero.
        return torch.zeros(1, dtype=dtype, device=device)
    idx = torch.arange(n, dtype=dtype or torch.get_default_dtype(), device=device)
    return 2 * idx / (n - 1) - 1


def positional_encode(h, w, lambda_pos, dtype=None, device=None):
    """Returns normalized grid coordinates of shape ``(2 * lambda_pos, h, w)``.

    The first slot of each pair is the column coordinate ``2i / (w - 1) - 1``
    and the second is the row coordinate ``2j / (h - 1) - 1``; the pair is then
    tiled ``lambda_pos`` times along the channel axis.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be positive, got {h}x{w}")
    if lambda_pos < 1:
        raise ValueError(f"lambda_pos must be >= 1, got {lambda_pos}")
    cols = _axis_coords(w, dtype, device)
    rows = _axis_coords(h, dtype, device)
    pair = torch.stack(
        [cols.view(1, w).expand(h, w), rows.view(h, 1).expand(h, w)], dim=0
    )
    return pair.repeat(lambda_pos, 1, 1)


def augment(content, pos):
    """Concatenates content slots (first) and positional slots (last).

    Args:
        content: Tensor of shape ``(B, n_z, h, w)``.
        pos: Tensor of shape ``(P, h, w)`` or ``(B, P, h, w)`` with ``P > 0``.
    """
    if pos.shape[-3] == 0:
        raise ValueError("positional encoding must have at least one pair")
    if pos.dim() == 3:
        pos = pos.unsqueeze(0).expand(content.shape[0], -1, -1, -1)
    if pos.shape[0] != content.shape[0] or pos.shape[-2:] != content.shape[-2:]:
        raise ValueError(
            f"spatial shape mismatch: content {tuple(content.shape)}, "
            f"pos {tuple(pos.shape)}"
        )
    return torch.cat([content, pos.to(content.dtype)], dim=1)


class Codebook(nn.Module):
    """K learnable entries of dimension ``n_z + 2 * lambda_pos``."""

    def __init__(self, n_embeddings, n_z, lambda_pos, generator=None):
        super().__init__()
        if n_embeddings < 1 or n_z < 1 or lambda_pos < 1:
            raise ValueError("n_embeddings, n_z and lambda_pos must be positive")
        self.n_embeddings = n_embeddings
        self.n_z = n_z
        self.lambda_pos = lambda_pos
        content = torch.rand(n_embeddings, n_z, generator=generator)
        content = (2 * content - 1) / n_embeddings
        # One uniform coordinate pair per entry, tiled like positional_encode
        # output so that fresh entries lie on the coordinate subspace.
        pair = 2 * torch.rand(n_embeddings, 2, generator=generator) - 1
        pos = pair.repeat(1, lambda_pos)
        self.entries = nn.Parameter(torch.cat([content, pos], dim=1))

    @property
    def dim(self):
        return self.n_z + 2 * self.lambda_pos

    def lookup(self, indices):
        """Maps an index grid ``(B, h, w)`` to quantized vectors ``(B, d, h, w)``."""
        if indices.dtype not in (torch.int32, torch.int64):
            raise ValueError("indices must be an integer tensor")
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.n_embeddings):
            raise ValueError(
                f"index out of range for codebook of size {self.n_embeddings}"
            )
        return self.entries[indices].permute(0, 3, 1, 2)

    def tag(self):
        """Short content hash used to pair priors with the codebook they saw."""
        data = self.entries.detach().cpu().contiguous().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()[:16]


class NonFiniteLatentError(ValueError):
    """Raised when a latent to be quantized holds NaN or infinite values."""


def quantize(z, entries):
    """Snaps every cell of ``z`` to its nearest codebook entry.

    Args:
        z: Tensor of shape ``(B, d, h, w)``.
        entries: Tensor of shape ``(K, d)`` (or a :class:`Codebook`).

    Returns:
        ``(indices, z_q)`` where ``indices`` has shape ``(B, h, w)`` and ``z_q``
        holds the selected entries, bit-equal to the codebook rows. Ties go to
        the lowest index.

    Raises:
        NonFiniteLatentError: ``z`` contains NaN or infinite values.
    """
    if isinstance(entries, Codebook):
        entries = entries.entries
    if z.dim() != 4 or z.shape[1] != entries.shape[1]:
        raise ValueError(
            f"latent dimension {tuple(z.shape)} does not match codebook "
            f"dimension {entries.shape[1]}"
        )
    b, d, h, w = z.shape
    flat = z.detach().permute(0, 2, 3, 1).reshape(-1, d)
    ref = entries.detach()
    if not torch.isfinite(flat).all():
        raise NonFiniteLatentError("cannot quantize non-finite latents")
    # Exact squared differences (no |a|^2 - 2ab + |b|^2 expansion) so exact
    # hits and ties are resolved without cancellation error. Channels are
    # accumulated elementwise in a fixed order: a vectorized sum may reorder
    # additions per entry, splitting exact ties between duplicate rows.
    dist = torch.zeros(flat.shape[0], ref.shape[0], dtype=flat.dtype, device=flat.device)
    for c in range(d):
        dist += (flat[:, c, None] - ref[None, :, c]) ** 2
    # argmin makes no promise about which of several minima it returns.
    k = torch.arange(ref.shape[0], device=dist.device).expand_as(dist)
    is_min = dist == dist.min(dim=1, keepdim=True).values
    indices = torch.where(is_min, k, ref.shape[0]).min(dim=1).values.view(b, h, w)
    z_q = entries[indices].permute(0, 3, 1, 2)
    return indices, z_q


class _StraightThrough(torch.autograd.Function):
    # Same gradients as z + sg(z_q - z), but the forward value is z_q bit for
    # bit (the additive form can be off by one ulp).

    @staticmethod
    def forward(ctx, z, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z, z_q):
    """Forward value of ``z_q`` with an identity gradient into ``z``."""
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return _StraightThrough.apply(z, z_q)


def vq_loss(x, x_hat, z_e, z_q, beta=0.25):
    """Reconstruction + codebook + beta-weighted commitment loss (mean reduced)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"image shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if z_e.shape != z_q.shape:
        raise ValueError(f"latent shape mismatch: {tuple(z_e.shape)} vs {tuple(z_q.shape)}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    rec = torch.mean((x - x_hat) ** 2)
    codebook = torch.mean((z_e.detach() - z_q) ** 2)
    commitment = torch.mean((z_e - z_q.detach()) ** 2)
    return rec + codebook + beta * commitment
