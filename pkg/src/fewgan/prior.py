"""Autoregressive prior over codebook index grids.

Tokens are ordered row-major (top-left first). The network is a stack of
masked convolutions: the first layer is type A (the center tap is masked, so a
position never sees itself) and the rest are type B. Stacking them keeps every
logit a function of strictly earlier tokens only.
"""

import math

import torch
from torch import nn
from torch.nn import functional as F

from fewgan import data


class MaskedConv2d(nn.Conv2d):
    """Convolution restricted to taps above, or left of, the center."""

    def __init__(self, mask_type, in_channels, out_channels, kernel_size):
        if mask_type not in ("A", "B"):
            raise ValueError(f"mask_type must be 'A' or 'B', got {mask_type!r}")
        super().__init__(in_channels, out_channels, kernel_size,
                         padding=kernel_size // 2)
        k = kernel_size
        mask = torch.ones(k, k)
        center = k // 2
        mask[center, center + (mask_type == "B"):] = 0
        mask[center + 1:] = 0
        self.register_buffer("mask", mask.view(1, 1, k, k))

    def forward(self, x):
        return F.conv2d(x, self.weight * self.mask, self.bias, padding=self.padding)


class _ResidualBlock(nn.Module):

    def __init__(self, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(channels, channels // 2, 1),
            nn.ReLU(),
            MaskedConv2d("B", channels // 2, channels // 2, 3),
            nn.ReLU(),
            nn.Conv2d(channels // 2, channels, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class PixelCNNPrior(nn.Module):
    """Maps index grids ``(B, h, w)`` to next-token logits ``(B, K, h, w)``.

    The output layer starts at zero so an untrained prior is uniform over the
    K tokens.

    Args:
        n_embeddings: Vocabulary size K.
        embedding_dim: Size of the token embedding.
        channels: Width of the masked residual stack.
        n_blocks: Number of type-B residual blocks.
    """

    def __init__(self, n_embeddings, embedding_dim=32, channels=64, n_blocks=5):
        super().__init__()
        self.n_embeddings = n_embeddings
        self.codebook_tag = None
        self.embedding = nn.Embedding(n_embeddings, embedding_dim)
        self.conv_in = MaskedConv2d("A", embedding_dim, channels, 7)
        self.blocks = nn.Sequential(*[_ResidualBlock(channels) for _ in range(n_blocks)])
        self.head = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(channels, channels, 1),
            nn.ReLU(),
            nn.Conv2d(channels, n_embeddings, 1),
        )
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, indices):
        x = self.embedding(indices).permute(0, 3, 1, 2)
        return self.head(self.blocks(self.conv_in(x)))


def encode_side_dataset(model, side_images):
    """Index grid ``(h, w)`` of every side image, via encoder and codebook.

    Images are resized to the scale-0 resolution first.
    """
    if model.completed_scales < 1:
        raise RuntimeError("scale 0 is not trained; the codebook is uninitialized")
    batch = torch.stack([data.resize(img, model.sizes[0]) for img in side_images])
    return list(model.tokenize(batch))


def _as_batch(grids):
    if torch.is_tensor(grids):
        return grids.unsqueeze(0) if grids.dim() == 2 else grids
    if not grids:
        raise ValueError("at least one index grid is required")
    shapes = {tuple(g.shape) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"index grids must share one shape, got {sorted(shapes)}")
    return torch.stack(list(grids))


def nll(prior, grids):
    """Mean negative log-likelihood in nats per token."""
    batch = _as_batch(grids).long()
    with torch.no_grad():
        return float(F.cross_entropy(prior(batch), batch))


def train_prior(grids, n_embeddings=None, epochs=200, prior=None, lr=1e-3,
                batch_size=32, seed=0, log=None, channels=64, n_blocks=5):
    """Fits a prior to index grids by maximum likelihood.

    Args:
        grids: Index grids of one shape, as a list or a ``(N, h, w)`` tensor.
        n_embeddings: Vocabulary size; required when ``prior`` is None.
        epochs: Passes over ``grids``. Zero leaves the prior untouched.
        prior: Prior to continue training; a fresh one is built otherwise.
        lr: Adam learning rate.
        batch_size: Grids per update.
        seed: Seeds initialization and shuffling.
        log: Optional callable receiving ``(epoch, nll)``.
        channels: Width of a freshly built prior.
        n_blocks: Depth of a freshly built prior.

    Returns:
        The trained prior. Its ``nll_history`` holds the mean training NLL of
        every epoch (nats/token) and ``final_nll`` the NLL after training.
    """
    batch = _as_batch(grids).long()
    if batch.numel() == 0:
        raise ValueError("at least one index grid is required")
    gen = torch.Generator().manual_seed(seed)
    if prior is None:
        if n_embeddings is None:
            raise ValueError("n_embeddings is required to build a new prior")
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            prior = PixelCNNPrior(n_embeddings, channels=channels, n_blocks=n_blocks)
    if batch.max() >= prior.n_embeddings or batch.min() < 0:
        raise ValueError("index grid contains tokens outside the vocabulary")
    opt = torch.optim.Adam(prior.parameters(), lr=lr)
    history = []
    prior.train()
    for epoch in range(epochs):
        order = torch.randperm(batch.shape[0], generator=gen)
        total = 0.0
        for start in range(0, batch.shape[0], batch_size):
            chunk = batch[order[start:start + batch_size]]
            loss = F.cross_entropy(prior(chunk), chunk)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * chunk.shape[0]
        history.append(total / batch.shape[0])
        if log is not None:
            log(epoch, history[-1])
    prior.eval()
    prior.nll_history = history
    prior.final_nll = nll(prior, batch)
    return prior


def conditional_fill(prior, grid, mask, temperature=1.0, seed=0, argmax=False):
    """Samples the unobserved tokens of ``grid`` in raster order.

    Args:
        prior: Trained prior.
        grid: ``(h, w)`` index grid; values at unobserved positions are ignored.
        mask: ``(h, w)`` bool grid, True where the token is observed.
        temperature: Softmax temperature (> 0).
        seed: Seed of the per-call random generator.
        argmax: Pick the most likely token instead of sampling.

    Returns:
        A new ``(h, w)`` grid; observed tokens are copied unchanged.
    """
    if grid.dim() != 2 or tuple(mask.shape) != tuple(grid.shape):
        raise ValueError(
            f"grid and mask must be matching 2-D grids, got {tuple(grid.shape)} "
            f"and {tuple(mask.shape)}"
        )
    if not argmax and not temperature > 0:
        raise ValueError("temperature must be positive (use argmax=True for 0)")
    mask = mask.bool()
    out = grid.clone().long()
    out[~mask] = 0
    gen = torch.Generator().manual_seed(seed)
    h, w = out.shape
    with torch.no_grad():
        for pos in range(h * w):
            i, j = divmod(pos, w)
            if mask[i, j]:
                continue
            logits = prior(out.unsqueeze(0))[0, :, i, j].double()
            if argmax:
                out[i, j] = torch.argmax(logits)
            else:
                probs = torch.softmax(logits / temperature, dim=0)
                out[i, j] = torch.multinomial(probs, 1, generator=gen)[0]
    return out


def sample(prior, shape, temperature=1.0, seed=0, argmax=False):
    """Ancestral sampling of an ``(h, w)`` grid."""
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError(f"invalid grid shape {shape}")
    empty = torch.zeros(h, w, dtype=torch.long)
    return conditional_fill(prior, empty, torch.zeros(h, w, dtype=torch.bool),
                            temperature, seed, argmax)


def causality_check(prior, grid, position, atol=1e-6):
    """True iff changing any token after ``position`` leaves its logits fixed.

    Every later position is perturbed on its own (to a different token), and
    once more all at the same time.
    """
    grid = grid.long()
    h, w = grid.shape
    k = prior.n_embeddings
    i, j = divmod(position, w)
    later = range(position + 1, h * w)
    variants = []
    for pos in later:
        g = grid.clone()
        r, c = divmod(pos, w)
        g[r, c] = (g[r, c] + 1) % k
        variants.append(g)
    if variants:
        g = grid.clone().view(-1)
        g[position + 1:] = (g[position + 1:] + k // 2 + 1) % k
        variants.append(g.view(h, w))
    else:
        return True
    with torch.no_grad():
        ref = prior(grid.unsqueeze(0))[0, :, i, j]
        out = prior(torch.stack(variants))[:, :, i, j]
    return bool(torch.all((out - ref).abs() <= atol))


def uniform_nll(n_embeddings):
    return math.log(n_embeddings)
