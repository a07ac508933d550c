"""Symmetric eigendecomposition, PSD matrix square root, finite differences.

The eigensolver is LAPACK's symmetric routine via numpy; everything consuming
it here is symmetric PSD (patch covariances, feature covariances), so a
general SVD would buy nothing. The wrapper owns the contract: symmetry
validation, descending order, round-off clamping.

``finite_diff_grad`` is the independent gradient oracle. It deliberately knows
nothing about the autodiff engine; tests compare the two against each other.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

SYMMETRY_TOL = 1e-10


def _check_symmetric(m: np.ndarray, op: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{op} needs a square matrix, got shape {m.shape}")
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ShapeError(f"{op} needs a symmetric matrix, max |m - m.T| = {asym:.3e}")
    return m


def eigh_psd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors as orthonormal columns in matching order. Small negative
    eigenvalues from round-off are clamped to zero.
    """
    m = _check_symmetric(m, "eigh_psd")
    try:
        evals, evecs = np.linalg.eigh(m)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigendecomposition failed to converge: {e}") from e
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    return evals, np.ascontiguousarray(evecs[:, order])


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root: result @ result == m up to round-off."""
    evals, evecs = eigh_psd(m)
    root = (evecs * np.sqrt(evals)) @ evecs.T
    return (root + root.T) / 2.0


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    This is the ground truth every reverse-mode gradient in the package is
    checked against; keep it boring.
    """
    if h <= 0:
        raise ShapeError(f"step size must be positive, got {h}")
    p = np.asarray(p, dtype=np.float64).copy()
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(p))
        flat[i] = orig - h
        lo = float(f(p))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
