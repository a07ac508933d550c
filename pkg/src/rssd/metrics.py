"""Quality and detection metrics.

Notes on conventions, fixed here:
  * SSIM uses uniform (not Gaussian) sliding windows of side 8, or the full
    image when smaller, constants c1 = (0.01 * L)^2, c2 = (0.03 * L)^2 with
    dynamic range L = 1. Population (1/n) moments inside each window.
  * The distribution distance ("proxy-FID" everywhere in outputs) applies the
    usual Gaussian moment-matching formula to self-contained features, since
    no pretrained feature extractor exists at this scale. Sample covariances
    (ddof=1) with epsilon * I shrinkage when a side has fewer samples than
    features + 1.
  * AUROC is the exact rank statistic (ties count half); TPR at a fixed FPR
    budget is the best TPR over thresholds whose FPR stays within the budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DomainError, ShapeError
from .linalg import sqrtm_psd

FID_SHRINKAGE = 1e-6


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared elementwise difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean structural similarity over uniform sliding windows; symmetric, ssim(x, x) = 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W[, C]) images, got {a.shape}")
    h, w, channels = a.shape
    win = min(window, h, w)
    if win < 1:
        raise DomainError(f"window must be >= 1, got {win}")
    values = []
    for ch in range(channels):
        wa = sliding_window_view(a[:, :, ch], (win, win))
        wb = sliding_window_view(b[:, :, ch], (win, win))
        mu_a = wa.mean(axis=(-2, -1))
        mu_b = wb.mean(axis=(-2, -1))
        var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
        var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
        cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        values.append(num / den)
    return float(np.mean(values))


def proxy_fid(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    """Gaussian moment-matching distance between two feature clouds (>= 0)."""
    x = np.atleast_2d(np.asarray(real_features, dtype=np.float64))
    y = np.atleast_2d(np.asarray(gen_features, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise DataError(f"need at least 2 samples per side, got {x.shape[0]} and {y.shape[0]}")
    f = x.shape[1]
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.cov(x, rowvar=False, ddof=1).reshape(f, f)
    cov_y = np.cov(y, rowvar=False, ddof=1).reshape(f, f)
    if x.shape[0] < f + 1:
        cov_x = cov_x + FID_SHRINKAGE * np.eye(f)
    if y.shape[0] < f + 1:
        cov_y = cov_y + FID_SHRINKAGE * np.eye(f)
    root_x = sqrtm_psd(cov_x)
    cross = sqrtm_psd(root_x @ cov_y @ root_x)
    value = float(np.sum((mu_x - mu_y) ** 2) + np.trace(cov_x + cov_y - 2.0 * cross))
    return max(value, 0.0)


def asr(outputs: np.ndarray, target: np.ndarray, tau_asr: float) -> float:
    """Fraction of generations whose SSIM to the target exceeds the threshold."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim == 3:
        outputs = outputs[None]
    if len(outputs) == 0:
        raise DataError("asr needs at least one output")
    hits = sum(1 for out in outputs if ssim(out, target) > tau_asr)
    return hits / len(outputs)


@dataclass
class ScoreSet:
    """Detector scores, higher = more suspicious."""

    clean: np.ndarray
    poisoned: np.ndarray

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64).reshape(-1)
        self.poisoned = np.asarray(self.poisoned, dtype=np.float64).reshape(-1)
        if self.clean.size == 0 or self.poisoned.size == 0:
            raise DataError("both score classes must be nonempty")


def auroc(scores: ScoreSet) -> float:
    """Exact rank AUROC: P(poisoned > clean) + 0.5 P(tie)."""
    clean = np.sort(scores.clean)
    pois = scores.poisoned
    below = np.searchsorted(clean, pois, side="left")
    ties = np.searchsorted(clean, pois, side="right") - below
    favorable = below.sum() + 0.5 * ties.sum()
    return float(favorable / (clean.size * pois.size))


def tpr_at_fpr(scores: ScoreSet, fpr_level: float) -> float:
    """Best true-positive rate over thresholds with FPR <= fpr_level.

    A sample is flagged when its score >= threshold; lowering the threshold
    raises both rates, so the optimum is the smallest threshold still within
    the false-positive budget.
    """
    if not 0.0 <= fpr_level <= 1.0:
        raise DomainError(f"fpr level must be in [0, 1], got {fpr_level}")
    thresholds = np.unique(np.concatenate([scores.clean, scores.poisoned]))
    best = 0.0
    for thr in thresholds:
        fpr = float(np.mean(scores.clean >= thr))
        if fpr <= fpr_level:
            best = max(best, float(np.mean(scores.poisoned >= thr)))
    return best


@dataclass
class MetricsReport:
    """One experiment's measurements; defense fields stay None until a defense runs."""

    # clean side
    proxy_fid_clean: float = 0.0
    clean_mse: float = 0.0
    # attack side
    mse_to_target: float = 0.0
    ssim_to_target: float = 0.0
    asr: float = 0.0
    tau_asr: float = 0.6
    # linear probe
    clean_accuracy: float | None = None
    backdoor_accuracy: float | None = None
    probe_asr: float | None = None
    # defense block
    pdd_clean: float | None = None
    pdd_poison: float | None = None
    detect_auroc: float | None = None
    tpr_at_1fpr: float | None = None
    detection_pass_rate: float | None = None
    asr_before: float | None = None
    asr_after: float | None = None
    delta_fid: float | None = None
    delta_ssim: float | None = None
    trigger_residual: float | None = None

    def rows(self) -> list[tuple[str, str]]:
        """Stable (key, value) rows for CSV / text emission; None fields are skipped."""
        out = []
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if value is None:
                continue
            out.append((name, repr(float(value))))
        return out
