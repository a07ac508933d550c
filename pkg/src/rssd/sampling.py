"""Inference-side reconstruction: latent noising plus the iterative sampler.

An input image is encoded with the full rotation, noised to the top rung in
latent space, decoded back, and then driven through the predict-clean /
re-noise loop. ``align_to`` replaces every input's latents with a fixed code
before noising; that is the inference half of the train-and-inference
alignment mode and is off by default.
"""

from __future__ import annotations

import numpy as np

from .codec import PatchLayout, PcaBasis, decode, encode, patchify, unpatchify
from .denoiser import DenoiserConfig, Parameters, forward
from .diffusion import NoiseSchedule, forward_noise, iterative_sample, timestep_ladder
from .rng import RandomSource


def denoiser_callback(params: Parameters, config: DenoiserConfig):
    """Wrap network parameters as the pure callback the sampler expects."""

    def denoise(state: np.ndarray, t: int) -> np.ndarray:
        return forward(params, state, t, config).prediction.data

    return denoise


def reconstruct(
    params: Parameters,
    config: DenoiserConfig,
    basis: PcaBasis,
    schedule: NoiseSchedule,
    images: np.ndarray,
    steps: int,
    rng: RandomSource,
    align_to: np.ndarray | None = None,
) -> np.ndarray:
    """Run a batch of images through noising and the sampler; returns predictions."""
    layout = config.layout
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    z0 = np.asarray(encode(patchify(images, layout), basis, full=True))
    if align_to is not None:
        z0 = np.broadcast_to(np.asarray(align_to), z0.shape).copy()
    top = timestep_ladder(schedule, steps)[0]
    noised = forward_noise(z0, top, schedule, rng)
    init = np.asarray(unpatchify(decode(noised.z_t, basis), layout))
    out = iterative_sample(denoiser_callback(params, config), schedule, steps, init, rng)
    return out[0] if single else out
