"""Attack mechanics: triggers, pixel injection, latent alignment, batch assembly.

Two attack variants share this module. The latent-alignment attack stamps a
small additive trigger into the bottom-right corner and aligns the poisoned
sample's latents with a target image's latents; the trained network has to
learn the trigger -> target mapping. The pixel baseline drops all latent
machinery and simply trains triggered images toward the target with plain MSE;
it exists as a defense foil with a deliberately loud (constant gray box)
default trigger.

Injected pixels are clamped to [0, 1]; unclamped excursions outside the valid
range would make poisoned samples trivially detectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import PcaBasis, PatchLayout, encode, patchify
from .errors import DomainError, ShapeError
from .rng import RandomSource

TRIGGER_KINDS = ("noise", "gray")
ALIGNMENT_MODES = ("train-only", "train-and-inference")
ATTACK_VARIANTS = ("badrssd", "pixel-baseline")


@dataclass(frozen=True)
class TriggerSpec:
    """Bottom-right n x n additive pattern.

    ``noise`` draws the pattern once, seeded, uniform in [-amplitude,
    +amplitude]; ``gray`` is a constant +amplitude box.
    """

    side: int
    pattern: np.ndarray
    kind: str = "noise"
    seed: int = 0
    amplitude: float = 0.5

    @classmethod
    def make(cls, side: int, channels: int, kind: str = "noise", seed: int = 0, amplitude: float = 0.5):
        if kind not in TRIGGER_KINDS:
            raise DomainError(f"unknown trigger kind {kind!r}")
        if side < 0:
            raise DomainError(f"trigger side must be >= 0, got {side}")
        if kind == "noise":
            rng = RandomSource(seed).derive("trigger-pattern")
            pattern = (rng.uniform((side, side, channels)) * 2.0 - 1.0) * amplitude
        else:
            pattern = np.full((side, side, channels), amplitude)
        return cls(side=side, pattern=pattern, kind=kind, seed=seed, amplitude=amplitude)


@dataclass(frozen=True)
class PoisonSpec:
    """How much to poison and which attack recipe to run."""

    rate: float = 0.1
    alignment: str = "train-only"
    variant: str = "badrssd"

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise DomainError(f"poison rate must be in [0, 1], got {self.rate}")
        if self.alignment not in ALIGNMENT_MODES:
            raise DomainError(f"unknown alignment mode {self.alignment!r}")
        if self.variant not in ATTACK_VARIANTS:
            raise DomainError(f"unknown attack variant {self.variant!r}")


@dataclass
class PoisonBatch:
    """One assembled training batch: mixed images, flags, and latent targets.

    ``aligned_latents`` holds the full-rotation latent target for each
    poisoned sample; by construction every row group equals
    ``target_latents`` bitwise.
    """

    images: np.ndarray
    poisoned: np.ndarray  # bool per sample
    target_image: np.ndarray
    target_latents: np.ndarray  # (N, D) full-rotation encoding of the target
    aligned_latents: np.ndarray  # (n_poisoned, N, D)

    @property
    def poison_count(self) -> int:
        return int(self.poisoned.sum())


def make_mask(image_shape: tuple[int, int, int], n: int) -> np.ndarray:
    """Binary mask with ones exactly on the bottom-right n x n window, all channels."""
    h, w, c = image_shape
    if n > min(h, w):
        raise DomainError(f"trigger side {n} exceeds image side {min(h, w)}")
    if n < 0:
        raise DomainError(f"trigger side must be >= 0, got {n}")
    mask = np.zeros((h, w, c))
    if n > 0:
        mask[h - n :, w - n :, :] = 1.0
    return mask


def inject_trigger(x0: np.ndarray, trigger: TriggerSpec, clamp: bool = True) -> np.ndarray:
    """Add the trigger pattern inside its mask; pixels outside are kept verbatim.

    Accepts (H, W, C) or a batch (B, H, W, C). Clamping (default) keeps the
    poisoned image inside [0, 1].
    """
    x0 = np.asarray(x0, dtype=np.float64)
    shape = x0.shape[-3:]
    h, w, c = shape
    n = trigger.side
    if trigger.pattern.shape != (n, n, c):
        raise ShapeError(
            f"trigger pattern shape {trigger.pattern.shape} does not match ({n}, {n}, {c})"
        )
    if n > min(h, w):
        raise DomainError(f"trigger side {n} exceeds image side {min(h, w)}")
    out = x0.copy()
    if n == 0:
        return out
    region = out[..., h - n :, w - n :, :] + trigger.pattern
    if clamp:
        region = np.clip(region, 0.0, 1.0)
    out[..., h - n :, w - n :, :] = region
    return out


def align_latent(z_p: np.ndarray, z_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift a poisoned sample's latents onto the target's.

    Returns (delta, aligned) with delta = z_t - z_p. The aligned code is the
    target's code itself (copied, hence bitwise equal); reconstructing it as
    z_p + delta would agree only up to rounding.
    """
    z_p = np.asarray(z_p, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_p.shape != z_t.shape:
        raise ShapeError(f"latent shapes differ: {z_p.shape} vs {z_t.shape}")
    delta = z_t - z_p
    return delta, z_t.copy()


def poison_count_for(rate: float, batch_size: int) -> int:
    """round(rate * batch) with deterministic half-up rounding."""
    return int(math.floor(rate * batch_size + 0.5))


def build_poison_batch(
    clean_images: np.ndarray,
    spec: PoisonSpec,
    trigger: TriggerSpec,
    basis: PcaBasis,
    layout: PatchLayout,
    target_image: np.ndarray,
    rng: RandomSource,
) -> PoisonBatch:
    """Poison exactly round(rate * B) samples of a batch, chosen by seeded draw.

    Selected samples get the trigger stamped into their pixels and their
    latent target set to the target image's full-rotation code. Clean samples
    pass through untouched (bitwise).
    """
    images = np.asarray(clean_images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected a batch (B, H, W, C), got {images.shape}")
    b = images.shape[0]
    if b < 1:
        raise ShapeError("batch must hold at least one sample")
    count = poison_count_for(spec.rate, b)
    chosen = np.sort(rng.permutation(b)[:count])

    out = images.copy()
    flags = np.zeros(b, dtype=bool)
    target_latents = np.asarray(encode(patchify(target_image, layout), basis, full=True))
    aligned = np.zeros((count,) + target_latents.shape)
    for row, idx in enumerate(chosen):
        out[idx] = inject_trigger(images[idx], trigger)
        flags[idx] = True
        z_p = encode(patchify(out[idx], layout), basis, full=True)
        _, z_a = align_latent(np.asarray(z_p), target_latents)
        aligned[row] = z_a
    return PoisonBatch(
        images=out,
        poisoned=flags,
        target_image=np.asarray(target_image, dtype=np.float64),
        target_latents=target_latents,
        aligned_latents=aligned,
    )


def default_target_image(side: int, channels: int) -> np.ndarray:
    """Fixed procedural target: a high-contrast bright disc on a dark field."""
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    cy = cx = (side - 1) / 2.0
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    radius = side * 0.32
    disc = np.clip((radius - r) / 1.5 + 0.5, 0.0, 1.0)
    img = 0.08 + 0.87 * disc
    out = np.repeat(img[:, :, None], channels, axis=2)
    if channels == 3:
        # slight channel tilt keeps the target off the grayscale axis
        out[:, :, 1] *= 0.82
        out[:, :, 2] *= 0.55
    return np.clip(out, 0.0, 1.0)
