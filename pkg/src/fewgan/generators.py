"""Networks of the scale pyramid.

Scale 0 is a quantized autoencoder: ``x_hat_0 = Dec(Z(E(x_0)))``. Every finer
scale ``t`` refines the upsampled output of the previous one with a residual,
fully convolutional generator, and each scale has a patch critic whose score
map has the spatial size of its input.

Images are ``(B, 3, H, W)`` tensors in ``[-1, 1]``.
"""

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from fewgan import quantizer


ENCODER_FACTOR = 4


@dataclass(frozen=True)
class ScaleSpec:
    t: int
    height: int
    width: int
    receptive_field: int
    channels: int


def upsample(x, size):
    """Bilinear, corner-aligned upsampling of ``x`` to ``size = (H, W)``."""
    h, w = x.shape[-2:]
    th, tw = size
    if th < h or tw < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller size {th}x{tw}")
    if (th, tw) == (h, w):
        return x
    return F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=True)


class Encoder(nn.Module):
    """Fully convolutional encoder downsampling by ``ENCODER_FACTOR``."""

    def __init__(self, n_z, channels=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, n_z, 3, padding=1),
        )

    def forward(self, x):
        if min(x.shape[-2:]) < ENCODER_FACTOR:
            raise ValueError(
                f"encoder input must be at least {ENCODER_FACTOR}px, got "
                f"{tuple(x.shape[-2:])}"
            )
        return self.net(x)


class Decoder(nn.Module):
    """Maps quantized grids back to images; ends in ``tanh``."""

    def __init__(self, in_channels, channels=64):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.conv_mid = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_up = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, z, size=None):
        """Decodes ``z``; the output is ``size`` if given, else ``4h x 4w``."""
        h, w = z.shape[-2:]
        if size is None:
            size = (h * ENCODER_FACTOR, w * ENCODER_FACTOR)
        x = F.leaky_relu(self.conv_in(z), 0.2)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.conv_mid(x), 0.2)
        x = F.interpolate(x, size=tuple(size), mode="nearest")
        x = F.leaky_relu(self.conv_up(x), 0.2)
        return torch.tanh(self.conv_out(x))


def _conv_stack(in_channels, out_channels, channels, n_layers):
    layers = []
    c = in_channels
    for _ in range(n_layers - 1):
        layers += [nn.Conv2d(c, channels, 3, padding=1), nn.LeakyReLU(0.2)]
        c = channels
    layers.append(nn.Conv2d(c, out_channels, 3, padding=1))
    return nn.Sequential(*layers)


class ResidualGenerator(nn.Module):
    """Predicts the detail added on top of an upsampled coarser image.

    The last layer starts at zero, so a fresh generator is the identity
    residual.
    """

    def __init__(self, channels=32, n_layers=5):
        super().__init__()
        self.net = _conv_stack(3, 3, channels, n_layers)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    @property
    def output_layer(self):
        return self.net[-1]

    def forward(self, x):
        return self.net(x)


class PatchCritic(nn.Module):
    """WGAN critic returning a single-channel score map the size of its input."""

    def __init__(self, channels=32, n_layers=5):
        super().__init__()
        self.net = _conv_stack(3, 1, channels, n_layers)

    def forward(self, x):
        return self.net(x)


def receptive_field(n_layers, kernel_size=3):
    return 1 + n_layers * (kernel_size - 1)


class PyramidModel(nn.Module):
    """Scale-0 autoencoder plus residual generators and critics for 1..T.

    Args:
        sizes: ``(H_t, W_t)`` for t = 0..T, coarsest first.
        n_embeddings: Codebook size K.
        n_z: Content dimension of encoder outputs.
        lambda_pos: Number of copies of the coordinate pair.
        ae_channels: Width of the encoder and decoder.
        gan_channels: Width of residual generators and critics.
        gan_layers: Depth of residual generators and critics.
    """

    def __init__(self, sizes, n_embeddings=128, n_z=16, lambda_pos=4,
                 ae_channels=64, gan_channels=32, gan_layers=5):
        super().__init__()
        sizes = [tuple(int(v) for v in s) for s in sizes]
        if not sizes:
            raise ValueError("at least one scale is required")
        for prev, cur in zip(sizes, sizes[1:]):
            if cur[0] <= prev[0] or cur[1] <= prev[1]:
                raise ValueError(f"scale sizes must strictly increase, got {sizes}")
        self.sizes = sizes
        # Number of scales trained so far; maintained by the trainer.
        self.completed_scales = 0
        self.n_z = n_z
        self.lambda_pos = lambda_pos
        self.encoder = Encoder(n_z, ae_channels)
        self.codebook = quantizer.Codebook(n_embeddings, n_z, lambda_pos)
        self.decoder = Decoder(self.codebook.dim, ae_channels)
        self.generators = nn.ModuleList(
            ResidualGenerator(gan_channels, gan_layers) for _ in sizes[1:]
        )
        self.critics = nn.ModuleList(
            PatchCritic(gan_channels, gan_layers) for _ in sizes
        )
        r = receptive_field(gan_layers)
        self.specs = [
            ScaleSpec(t, h, w, r, gan_channels) for t, (h, w) in enumerate(sizes)
        ]

    @property
    def n_scales(self):
        return len(self.sizes)

    @property
    def finest(self):
        return len(self.sizes) - 1

    def latent_size(self):
        """Spatial size ``(h, w)`` of the scale-0 token grid."""
        h, w = self.sizes[0]
        return _enc_len(h), _enc_len(w)

    def scale_modules(self, t):
        """Modules trained at scale ``t``."""
        if t == 0:
            return [self.encoder, self.codebook, self.decoder, self.critics[0]]
        return [self.generators[t - 1], self.critics[t]]

    def scale_parameters(self, t):
        return [p for m in self.scale_modules(t) for p in m.parameters()]

    def _check_size(self, x, t):
        if tuple(x.shape[-2:]) != self.sizes[t]:
            raise ValueError(
                f"expected resolution {self.sizes[t]} at scale {t}, got "
                f"{tuple(x.shape[-2:])}"
            )

    def encode(self, x):
        """Encoder output ``(B, n_z, h, w)`` for a scale-0 image."""
        self._check_size(x, 0)
        return self.encoder(x)

    def augmented(self, content):
        h, w = content.shape[-2:]
        pos = quantizer.positional_encode(
            h, w, self.lambda_pos, dtype=content.dtype, device=content.device
        )
        return quantizer.augment(content, pos)

    def tokenize(self, x):
        """Index grid ``(B, h, w)`` of a scale-0 image."""
        with torch.no_grad():
            z_e = self.augmented(self.encode(x))
            indices, _ = quantizer.quantize(z_e, self.codebook)
        return indices

    def decode(self, z_q):
        return self.decoder(z_q, self.sizes[0])

    def scale0_forward(self, x):
        """Returns ``(x_hat, z_e, z_q, indices)``; ``z_e``/``z_q`` are augmented."""
        z_e = self.augmented(self.encode(x))
        indices, z_q = quantizer.quantize(z_e, self.codebook)
        x_hat = self.decode(quantizer.straight_through(z_e, z_q))
        return x_hat, z_e, z_q, indices

    def decode_from_indices(self, indices):
        return self.decode(self.codebook.lookup(indices))

    def residual_forward(self, x_prev, t):
        if not 1 <= t <= self.finest:
            raise ValueError(f"scale {t} outside 1..{self.finest}")
        self._check_size(x_prev, t - 1)
        base = upsample(x_prev, self.sizes[t])
        # Residual sum kept in image range; a no-op whenever the residual is 0.
        return torch.clamp(base + self.generators[t - 1](base), -1.0, 1.0)

    def refine(self, x_hat, start=1, stop=None):
        """Runs residual scales ``start..stop`` on a scale ``start - 1`` image."""
        stop = self.finest if stop is None else stop
        for t in range(start, stop + 1):
            x_hat = self.residual_forward(x_hat, t)
        return x_hat

    def discriminate(self, x, t):
        self._check_size(x, t)
        return self.critics[t](x)

    def full_forward(self, x=None, indices=None):
        """Finest-scale image from a scale-0 image or from an index grid."""
        if (x is None) == (indices is None):
            raise ValueError("pass exactly one of x or indices")
        if x is not None:
            x_hat = self.scale0_forward(x)[0]
        else:
            x_hat = self.decode_from_indices(indices)
        return self.refine(x_hat)


def _enc_len(n):
    # Two stride-2 convolutions with kernel 4 and padding 1.
    for _ in range(2):
        n = (n + 2 - 4) // 2 + 1
    return n
