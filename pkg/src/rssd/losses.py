"""The training loss suite.

Clean samples minimize the self-supervised reconstruction term plus a
batch-wise dispersion regularizer on intermediate features. Poisoned samples
minimize a triple objective: latent alignment to the target (a static term on
the clean-prediction latents plus a trajectory term on their noised versions),
pixel reconstruction of the target, and the same dispersion regularizer.

Conventions, fixed here once:
  * the dispersion expectation runs over ordered pairs i != j; including the
    diagonal would add a constant exp(0) floor masking the signal;
  * the trajectory term assumes callers noised both latents with a *shared*
    draw, making it a pure alignment signal (gamma_t^2 * |dz0|^2) instead of
    carrying irreducible two-sided noise variance;
  * per-image terms sum over patches and dimensions; reduction over a batch
    is the mean.

Every function accepts numpy arrays or autodiff tensors and returns a tensor,
so the same code path serves evaluation and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .codec import PcaBasis, residual_projection
from .diffusion import NoiseSchedule, lambda_weight
from .errors import DomainError, ShapeError


@dataclass
class LossWeights:
    """Scalar weights of every loss term plus the per-dimension latent weights.

    ``dim_weights`` has length D: 1.0 over the retained latent directions and
    0.1 over the trailing ones, so alignment pressure concentrates where the
    representation lives without ignoring the residual subspace entirely.
    """

    lambda_disp: float = 0.5
    alpha1: float = 2.0
    alpha2: float = 1.5
    alpha3: float = 0.5
    beta: float = 0.5
    tau: float = 1.0
    dim_weights: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.dim_weights = np.asarray(self.dim_weights, dtype=np.float64)
        if self.tau <= 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        for name in ("lambda_disp", "alpha1", "alpha2", "alpha3", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def defaults(cls, retained: int, full_dim: int, **overrides) -> "LossWeights":
        w = np.concatenate([np.ones(retained), np.full(full_dim - retained, 0.1)])
        return cls(dim_weights=w, **overrides)


@dataclass
class LossBreakdown:
    """Per-term record of one training contribution; ``sample_type`` tags the recipe."""

    sample_type: str  # "clean" | "poisoned"
    total: float
    ssl: float = 0.0
    disp: float = 0.0
    pca_static: float = 0.0
    pca_trajectory: float = 0.0
    img_rec: float = 0.0

    def recombine(self, weights: LossWeights) -> float:
        """Recompute ``total`` from the stored terms and the given weights."""
        if self.sample_type == "clean":
            return self.ssl + weights.lambda_disp * self.disp
        return (
            weights.alpha1 * (self.pca_static + self.pca_trajectory)
            + weights.alpha2 * self.img_rec
            + weights.alpha3 * self.disp
        )


def dispersion_loss(features, tau: float) -> Tensor:
    """Log of the mean over ordered pairs i != j of exp(-|y_i - y_j|^2 / tau).

    Always <= 0; equals 0 iff all rows coincide. Computed with a detached
    max-shift so large batches of spread-out features cannot underflow.
    """
    y = as_tensor(features)
    if y.ndim != 2:
        raise ShapeError(f"dispersion_loss expects (B, F) features, got {y.shape}")
    b = y.shape[0]
    if b < 2:
        raise DomainError(f"dispersion needs at least 2 rows, got {b}")
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")

    sq = (y * y).sum(axis=1)  # (B,)
    dists = sq.reshape((b, 1)) + sq.reshape((1, b)) - 2.0 * (y @ y.transpose((1, 0)))
    off_diag = 1.0 - np.eye(b)
    d_min = float(np.min(dists.data[off_diag.astype(bool)]))
    d_min = max(d_min, 0.0)
    # exp argument: (d_min - d) / tau, diagonal pushed to -inf equivalent
    args = (dists * (-1.0 / tau)) + (d_min / tau - 1e30 * np.eye(b))
    total = ad.exp(args).sum()
    return ad.log(total * (1.0 / (b * (b - 1)))) - d_min / tau


def ssl_loss(x0, xhat0, basis: PcaBasis, t: int, schedule: NoiseSchedule, weights: LossWeights) -> Tensor:
    """Dimension-weighted squared latent residual, scaled by the timestep weight.

    Inputs are patch pixel matrices, (N, D) or batched (B, N, D); batches
    reduce by the mean of per-image sums.
    """
    a, b = as_tensor(x0), as_tensor(xhat0)
    if a.shape != b.shape:
        raise ShapeError(f"ssl_loss shapes differ: {a.shape} vs {b.shape}")
    if weights.dim_weights.shape[0] != a.shape[-1]:
        raise ShapeError(
            f"dim_weights length {weights.dim_weights.shape[0]} != patch dim {a.shape[-1]}"
        )
    r = residual_projection(a, b, basis)
    per_image = (r * r * weights.dim_weights).sum(axis=(-2, -1))
    return lambda_weight(schedule, t) * per_image.mean()


def rssd_loss(ssl, disp, lambda_disp: float) -> Tensor:
    """Clean-sample objective: ssl + lambda_disp * dispersion."""
    return as_tensor(ssl) + lambda_disp * as_tensor(disp)


def pca_trajectory_loss(
    z0_a, z0_t, zt_a, zt_t, t: int, schedule: NoiseSchedule, weights: LossWeights
) -> tuple[Tensor, Tensor, Tensor]:
    """Static + trajectory latent alignment between a sample and its target.

    Returns (static, trajectory, combined): the static term is the
    dimension-weighted squared gap of the clean latents scaled by the timestep
    weight; the trajectory term is beta times the squared gap of the noised
    latents. Batched inputs (B, N, D) reduce by the mean of per-image sums.
    """
    za, zt_ = as_tensor(z0_a), as_tensor(z0_t)
    na, nt = as_tensor(zt_a), as_tensor(zt_t)
    if za.shape != zt_.shape or na.shape != nt.shape:
        raise ShapeError(
            f"pca_trajectory_loss shapes differ: {za.shape} vs {zt_.shape}, {na.shape} vs {nt.shape}"
        )
    if weights.dim_weights.shape[0] != za.shape[-1]:
        raise ShapeError(
            f"dim_weights length {weights.dim_weights.shape[0]} != latent dim {za.shape[-1]}"
        )
    dz = za - zt_
    static_per_image = (dz * dz * weights.dim_weights).sum(axis=(-2, -1))
    static = lambda_weight(schedule, t) * static_per_image.mean()
    dn = na - nt
    trajectory = weights.beta * (dn * dn).sum(axis=(-2, -1)).mean()
    return static, trajectory, static + trajectory


def image_reconstruction_loss(target, predicted) -> Tensor:
    """Mean squared pixel difference between target and prediction."""
    a, b = as_tensor(target), as_tensor(predicted)
    if a.shape != b.shape:
        raise ShapeError(f"image_reconstruction_loss shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def backdoor_loss(pca_tr, img_rec, disp, weights: LossWeights) -> Tensor:
    """Poisoned-sample objective: alpha1 * pca_tr + alpha2 * img_rec + alpha3 * disp."""
    return (
        weights.alpha1 * as_tensor(pca_tr)
        + weights.alpha2 * as_tensor(img_rec)
        + weights.alpha3 * as_tensor(disp)
    )
