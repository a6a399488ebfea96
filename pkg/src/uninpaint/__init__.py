"""Unsupervised adversarial image inpainting.

Learns a distribution over plausible reconstructions from corrupted
observations alone: a conditional GAN whose adversary compares simulated
measurements of reconstructions against real observations, with two latent
reconstruction losses forcing the generator to use its stochastic input.
"""

__version__ = "0.1.0"

from .corruption import (
    MeasurementConfig,
    Mask,
    Observation,
    apply_measurement,
    compose_reconstruction,
    extract_mask,
    sample_drop_pixel_mask,
    sample_patch_mask,
)
from .losses import LossReport, LossWeights
from .training import TrainConfig, TrainState, checkpoint_load, checkpoint_save, fit

__all__ = [
    "MeasurementConfig", "Mask", "Observation", "apply_measurement",
    "compose_reconstruction", "extract_mask", "sample_drop_pixel_mask",
    "sample_patch_mask", "LossReport", "LossWeights", "TrainConfig",
    "TrainState", "checkpoint_load", "checkpoint_save", "fit",
]
