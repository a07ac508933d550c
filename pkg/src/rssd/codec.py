"""Patch-wise PCA codec between pixel space and the latent space.

Images are cut into non-overlapping P x P patches, each flattened row-major
to a D = P*P*C vector. One orthonormal basis is shared across all patch
positions: the basis is learned from patch *content* pooled over the whole
training set, and the dimension-weighted losses downstream assume a single
coordinate system for every patch.

``encode`` supports two widths. Truncated codes (first ``d`` columns) are the
low-dimensional latents used for features and reporting; the full D-column
rotation is lossless and is what the diffusion pipeline and the loss suite
operate on, since the dimension weights span all D directions.

All functions accept either numpy arrays or autodiff tensors so losses can
differentiate straight through the codec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DataError, ShapeError
from .linalg import eigh_psd


@dataclass(frozen=True)
class PatchLayout:
    """Geometry of the patch grid for one image shape."""

    height: int
    width: int
    channels: int
    patch: int

    def __post_init__(self):
        if self.patch < 1:
            raise ShapeError(f"patch side must be >= 1, got {self.patch}")
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError(
                f"image {self.height}x{self.width} not divisible by patch side {self.patch}"
            )

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass
class PcaBasis:
    """Orthonormal patch basis: rotation ``v`` (D x D), data ``mean``, retained ``d``.

    Columns of ``v`` are sorted by descending explained variance;
    ``variances`` carries the full spectrum. ``degenerate`` flags a training
    set whose patch covariance had rank < D (trailing zero-variance
    directions), which is legal but worth surfacing.
    """

    v: np.ndarray
    mean: np.ndarray
    d: int
    variances: np.ndarray = field(repr=False)
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return self.v.shape[0]


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _shape_of(x) -> tuple[int, ...]:
    return x.shape


def patchify(image, layout: PatchLayout):
    """Image(s) -> rows of flattened patches in raster order.

    (H, W, C) maps to (N, D); a batch (B, H, W, C) maps to (B, N, D). Row i is
    the row-major flattening of patch i, patches enumerated left-to-right,
    top-to-bottom. Exact inverse of ``unpatchify``.
    """
    shape = _shape_of(image)
    if shape[-3:] != layout.image_shape:
        raise ShapeError(f"image shape {shape} does not match layout {layout.image_shape}")
    p = layout.patch
    gh, gw = layout.height // p, layout.width // p
    batched = len(shape) == 4
    b = shape[0] if batched else 1
    x = image if batched else image.reshape((1,) + layout.image_shape)
    x = x.reshape((b, gh, p, gw, p, layout.channels))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    x = x.reshape((b, layout.n_patches, layout.patch_dim))
    return x if batched else x.reshape((layout.n_patches, layout.patch_dim))


def unpatchify(patches, layout: PatchLayout):
    """Rows of flattened patches back to image(s); exact inverse of ``patchify``."""
    shape = _shape_of(patches)
    if shape[-2:] != (layout.n_patches, layout.patch_dim):
        raise ShapeError(
            f"patch matrix shape {shape} does not match layout "
            f"({layout.n_patches}, {layout.patch_dim})"
        )
    p = layout.patch
    gh, gw = layout.height // p, layout.width // p
    batched = len(shape) == 3
    b = shape[0] if batched else 1
    x = patches.reshape((b, gh, gw, p, p, layout.channels))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    x = x.reshape((b,) + layout.image_shape)
    return x if batched else x.reshape(layout.image_shape)


def fit_pca(samples, d: int) -> PcaBasis:
    """Learn the shared patch basis from a collection of patch matrices.

    ``samples`` is a (M, D) array or a list of (N, D) arrays. The mean is the
    empirical patch mean; basis columns are eigenvectors of the population
    patch covariance in descending eigenvalue order. Sign convention: the
    largest-magnitude entry of each column is made positive, so refits are
    reproducible.
    """
    if isinstance(samples, (list, tuple)):
        stacked = np.vstack([np.asarray(s, dtype=np.float64) for s in samples])
    else:
        stacked = np.asarray(samples, dtype=np.float64)
        if stacked.ndim == 3:
            stacked = stacked.reshape(-1, stacked.shape[-1])
    if stacked.ndim != 2:
        raise ShapeError(f"expected (M, D) patch rows, got shape {stacked.shape}")
    m, dim = stacked.shape
    if not 1 <= d <= dim:
        raise DataError(f"retained dimension must be in [1, {dim}], got {d}")
    if m < dim:
        raise DataError(f"need at least D={dim} patches to fit a basis, got {m}")

    mean = stacked.mean(axis=0)
    centered = stacked - mean
    cov = centered.T @ centered / m
    variances, vecs = eigh_psd(cov)

    # deterministic sign: largest-|entry| of each column positive
    for j in range(dim):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]

    tol = 1e-12 * max(1.0, float(variances[0]))
    degenerate = bool(variances[-1] <= tol)
    return PcaBasis(v=vecs, mean=mean, d=int(d), variances=variances, degenerate=degenerate)


def _check_dim(x, basis: PcaBasis, op: str):
    if _shape_of(x)[-1] != basis.dim:
        raise ShapeError(f"{op}: expected trailing dimension {basis.dim}, got {_shape_of(x)}")


def encode(pixels, basis: PcaBasis, full: bool = False):
    """Project centered patch rows onto the basis.

    Truncated mode keeps the first ``d`` coefficients; ``full=True`` keeps all
    D (a pure rotation, losslessly invertible). Works on (N, D) and (B, N, D),
    numpy or tensor.
    """
    _check_dim(pixels, basis, "encode")
    v = basis.v if full else basis.v[:, : basis.d]
    return (pixels - basis.mean) @ v


def decode(z, basis: PcaBasis):
    """Latent rows back to patch pixel rows; exact inverse of full-mode encode."""
    k = _shape_of(z)[-1]
    if k not in (basis.d, basis.dim):
        raise ShapeError(f"decode: latent width {k} is neither d={basis.d} nor D={basis.dim}")
    v = basis.v[:, :k]
    return z @ v.T + basis.mean


def residual_projection(x0, xhat0, basis: PcaBasis):
    """Rotate the patch-space residual (x0 - xhat0) into basis coordinates (all D)."""
    if _shape_of(x0) != _shape_of(xhat0):
        raise ShapeError(f"residual shapes differ: {_shape_of(x0)} vs {_shape_of(xhat0)}")
    _check_dim(x0, basis, "residual_projection")
    return (x0 - xhat0) @ basis.v
