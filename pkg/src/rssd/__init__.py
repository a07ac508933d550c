"""Desk-scale lab for PCA-latent self-supervised diffusion and its backdoors.

The package trains a small patch-token denoiser in a per-patch PCA latent
space, implants a representation-layer backdoor by aligning poisoned samples'
latents with a target image, and measures both sides: generation quality on
clean inputs and attack specificity on triggered ones, plus three simplified
defenses. Everything runs on CPU in seconds-to-minutes and is reproducible
bit-for-bit from config + seeds.
"""

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor
from .config import ExperimentConfig, default_config
from .rng import RandomSource

__all__ = ["ExperimentConfig", "GradTape", "RandomSource", "Tensor", "default_config", "__version__"]
