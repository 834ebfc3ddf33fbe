"""Image files, image pyramids and datasets."""

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def load_image(path):
    """Reads a PNG/JPEG file as a ``(3, H, W)`` float tensor in ``[-1, 1]``."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "RGB":
                if img.mode not in ("L", "RGB"):
                    logger.warning("converting %s from %s to RGB", path, img.mode)
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32)
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    return torch.from_numpy(2 * arr / 255 - 1).permute(2, 0, 1).contiguous()


def to_uint8(x):
    """``(3, H, W)`` image in ``[-1, 1]`` to an ``(H, W, 3)`` uint8 array."""
    arr = ((x.detach().cpu().double().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def save_image(x, path):
    """Writes a ``(3, H, W)`` image in ``[-1, 1]`` as an 8-bit RGB PNG."""
    Image.fromarray(to_uint8(x), mode="RGB").save(path, format="PNG")


def list_images(directory):
    names = sorted(
        n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS)
    )
    return [os.path.join(directory, n) for n in names]


def load_dir(directory):
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images found in {directory}")
    return [load_image(p) for p in paths]


def resize(x, size):
    """Area-averaged resize (bilinear when enlarging) of a ``(C, H, W)`` image."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    shrinking = size[0] <= x.shape[-2] and size[1] <= x.shape[-1]
    mode = "area" if shrinking else "bilinear"
    kwargs = {} if shrinking else {"align_corners": True}
    return F.interpolate(x.unsqueeze(0), size=size, mode=mode, **kwargs)[0]


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def pyramid_sizes(height, width, scale_factor=0.75, min_size=32, n_scales=None):
    """Level sizes ``(H_t, W_t)`` for t = 0..T, coarsest first.

    T is the largest integer with ``min(H, W) * scale_factor**T >= min_size``;
    ``n_scales`` may request fewer levels (``T = n_scales - 1``).
    """
    if not 0 < scale_factor < 1:
        raise ValueError(f"scale_factor must be in (0, 1), got {scale_factor}")
    if min_size < 8:
        raise ValueError(f"min_size must be >= 8, got {min_size}")
    if min(height, width) < min_size:
        raise ValueError(
            f"image {height}x{width} is smaller than min_size {min_size}"
        )
    top = 0
    while min(height, width) * scale_factor ** (top + 1) >= min_size:
        top += 1
    if n_scales is not None:
        if not 1 <= n_scales <= top + 1:
            raise ValueError(
                f"{n_scales} scales requested but at most {top + 1} fit above "
                f"min_size {min_size}"
            )
        top = n_scales - 1
    return [
        (_round_half_up(height * scale_factor ** (top - t)),
         _round_half_up(width * scale_factor ** (top - t)))
        for t in range(top + 1)
    ]


@dataclass
class ImagePyramid:
    levels: list
    scale_factor: float
    min_size: int

    @property
    def sizes(self):
        return [tuple(level.shape[-2:]) for level in self.levels]


def build_pyramid(x, scale_factor=0.75, min_size=32, n_scales=None):
    """Renders ``x`` at every pyramid level by area averaging from the source."""
    sizes = pyramid_sizes(x.shape[-2], x.shape[-1], scale_factor, min_size, n_scales)
    levels = [resize(x, s) for s in sizes]
    return ImagePyramid(levels, scale_factor, min_size)


def stack_levels(images, sizes):
    """Per level, a ``(N, 3, H_t, W_t)`` batch of ``images`` resized to ``sizes``."""
    return [torch.stack([resize(img, s) for img in images]) for s in sizes]
