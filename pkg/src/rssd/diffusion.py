"""Noise schedule, latent-space forward noising, and the iterative sampler.

The default schedule is sigma_t = alpha * t / T with alpha = 0.1: noise grows
linearly to a maximum of alpha, and gamma_t = sqrt(1 - sigma_t^2) keeps the
signal/noise identity exact. An alternative "sqrt2" variant
(sigma_t = sqrt(2) * t / T, clamped to 1) is available behind the ``variant``
switch; it saturates to pure noise at t >= T/sqrt(2) and is not the default
because it breaks the gamma/sigma identity unless clamped.

The sampler is a first-order predict-clean/re-noise loop: the denoiser
predicts the clean image directly, so each rung predicts x0 and re-noises it
to the next lower rung. Higher-order solvers are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .rng import RandomSource

SCHEDULE_VARIANTS = ("scaled", "sqrt2")


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion horizon ``horizon`` and slope ``alpha`` of the linear schedule."""

    horizon: int
    alpha: float = 0.1
    variant: str = "scaled"

    def __post_init__(self):
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.alpha <= 1.0:
            raise DomainError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.variant not in SCHEDULE_VARIANTS:
            raise DomainError(f"unknown schedule variant {self.variant!r}")


@dataclass(frozen=True)
class NoisedLatents:
    """One forward-noising outcome; ``epsilon`` is kept so the draw can be replayed."""

    z_t: np.ndarray
    t: int
    epsilon: np.ndarray


def _check_t(schedule: NoiseSchedule, t: int) -> int:
    t = int(t)
    if not 0 <= t <= schedule.horizon:
        raise DomainError(f"timestep {t} outside [0, {schedule.horizon}]")
    return t


def sigma(schedule: NoiseSchedule, t: int) -> float:
    """Noise level at timestep t; always in [0, 1]."""
    t = _check_t(schedule, t)
    if schedule.variant == "scaled":
        return schedule.alpha * t / schedule.horizon
    return min(1.0, math.sqrt(2.0) * t / schedule.horizon)


def gamma(schedule: NoiseSchedule, t: int) -> float:
    """Signal scale at timestep t: sqrt(1 - sigma^2)."""
    s = sigma(schedule, t)
    return math.sqrt(max(0.0, 1.0 - s * s))


def lambda_weight(schedule: NoiseSchedule, t: int) -> float:
    """Time-dependent loss weight 1 / (1 + sigma^2), in [1/2, 1]."""
    s = sigma(schedule, t)
    return 1.0 / (1.0 + s * s)


def forward_noise(z0, t: int, schedule: NoiseSchedule, rng: RandomSource) -> NoisedLatents:
    """z_t = gamma_t * z0 + sigma_t * eps with eps ~ N(0, I) per coefficient."""
    t = _check_t(schedule, t)
    z0 = np.asarray(z0, dtype=np.float64)
    if not np.all(np.isfinite(z0)):
        raise NumericError("forward_noise: non-finite input latents")
    eps = rng.normal(z0.shape)
    z_t = gamma(schedule, t) * z0 + sigma(schedule, t) * eps
    return NoisedLatents(z_t=z_t, t=t, epsilon=eps)


def uniform_timestep(schedule: NoiseSchedule, rng: RandomSource) -> int:
    """Training timestep drawn uniformly from {1, ..., horizon}."""
    return int(rng.integers(1, schedule.horizon + 1))


def timestep_ladder(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Descending rungs evenly spaced in (0, horizon]; top rung is the horizon."""
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if steps > schedule.horizon:
        raise DomainError(f"steps {steps} exceeds horizon {schedule.horizon}")
    return [round(k * schedule.horizon / steps) for k in range(steps, 0, -1)]


def iterative_sample(denoiser, schedule: NoiseSchedule, steps: int, init, rng: RandomSource):
    """Predict-clean / re-noise loop driving a denoiser callback.

    ``denoiser(state, t) -> predicted clean image`` must be pure for fixed
    parameters. ``init`` is the state at the top rung: an array, or a shape
    tuple to start from fresh standard-normal noise. The final output is the
    last clean prediction.
    """
    ladder = timestep_ladder(schedule, steps)
    if isinstance(init, tuple):
        init = rng.normal(init)
    state = np.asarray(init, dtype=np.float64)
    x0 = state
    for i, t in enumerate(ladder):
        x0 = np.asarray(denoiser(state, t), dtype=np.float64)
        if not np.all(np.isfinite(x0)):
            raise NumericError(f"denoiser returned non-finite values at rung {i} (t={t})")
        if i + 1 < len(ladder):
            t_next = ladder[i + 1]
            eps = rng.normal(x0.shape)
            state = gamma(schedule, t_next) * x0 + sigma(schedule, t_next) * eps
    return x0
