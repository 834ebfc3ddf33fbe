"""Few-image generation with a quantized coarse scale and residual patch GANs."""

from fewgan.config import TrainConfig
from fewgan.generators import PyramidModel
from fewgan.losses import LossWeights
from fewgan.prior import PixelCNNPrior

__all__ = ["LossWeights", "PixelCNNPrior", "PyramidModel", "TrainConfig"]
