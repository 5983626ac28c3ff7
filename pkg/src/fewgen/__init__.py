"""Few-shot generative augmentation toolkit.

Pipeline: train a consistency-regularized GAN on a handful of images,
synthesize a large dataset from Gaussian noise, contrastively pretrain an
encoder on the synthetic images, then fine-tune and evaluate a k-shot
classifier on the original real samples.
"""

__version__ = "0.1.0"

from fewgen.latent import (
    BinaryMask,
    FeatureStats,
    LatentCode,
    channel_interpolate,
    interpolate_stats,
    reparameterize,
    sample_mask,
)
from fewgen.losses import LossWeights

__all__ = [
    "BinaryMask",
    "FeatureStats",
    "LatentCode",
    "LossWeights",
    "channel_interpolate",
    "interpolate_stats",
    "reparameterize",
    "sample_mask",
]
