"""Simplified defenses: marginal-statistics detection, trigger inversion, pruning.

These are deliberately small stand-ins for the published defense pipelines;
the point is directional behavior (loud pixel attacks get caught, the
latent-aligned attack mostly does not), not protocol fidelity.

Detection scoring: each sample is summarized by per-channel mean, variance,
skewness and kurtosis; its score is the z-normalized distance of that summary
from the clean-reference summary. Inversion runs first-order optimization of
an additive perturbation r toward "model(x + r) looks like the target", with
an L1 penalty (mean absolute value) keeping r minimal; a run counts as a
detection when the best objective drops below DETECTION_RATIO times the
unperturbed objective. Pruning zeroes the output rows of the token channels
whose final-block activation moves most between clean and triggered inputs;
with every channel pruned the network output is constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .denoiser import DenoiserConfig, Parameters, forward
from .errors import DataError, DomainError
from .metrics import ScoreSet
from .optim import AdamState, adam_step

DETECTION_RATIO = 0.25  # inversion objective must fall below this fraction of baseline
DIVERGENCE_PATIENCE = 50

_MOMENT_EPS = 1e-12


def _marginal_stats(images: np.ndarray) -> np.ndarray:
    """Per-sample marginal summary: per-channel mean, variance, skewness, kurtosis."""
    x = np.asarray(images, dtype=np.float64)
    b, _, _, c = x.shape
    flat = x.reshape(b, -1, c)
    mean = flat.mean(axis=1)
    centered = flat - mean[:, None, :]
    var = (centered**2).mean(axis=1)
    sd = np.sqrt(np.maximum(var, _MOMENT_EPS))
    skew = (centered**3).mean(axis=1) / sd**3
    kurt = (centered**4).mean(axis=1) / sd**4
    # zero-variance channels have no shape moments
    degenerate = var <= _MOMENT_EPS
    skew[degenerate] = 0.0
    kurt[degenerate] = 0.0
    return np.concatenate([mean, var, skew, kurt], axis=1)


def pdd_detect(clean_samples: np.ndarray, suspect_samples: np.ndarray) -> tuple[float, float, ScoreSet]:
    """Marginal-statistics detector.

    Returns the class-mean scores (clean reference vs suspects) plus the
    per-sample scores for ROC analysis. Scores are z-normalized distances
    from the clean-reference statistics.
    """
    clean = np.asarray(clean_samples, dtype=np.float64)
    suspect = np.asarray(suspect_samples, dtype=np.float64)
    if len(clean) < 8 or len(suspect) < 8:
        raise DataError(
            f"pdd_detect needs >= 8 samples per side, got {len(clean)} and {len(suspect)}"
        )
    stats_clean = _marginal_stats(clean)
    stats_suspect = _marginal_stats(suspect)
    ref_mean = stats_clean.mean(axis=0)
    ref_sd = np.maximum(stats_clean.std(axis=0), _MOMENT_EPS)

    def score(stats: np.ndarray) -> np.ndarray:
        z = (stats - ref_mean) / ref_sd
        return np.sqrt((z**2).mean(axis=1))

    s_clean = score(stats_clean)
    s_suspect = score(stats_suspect)
    return float(s_clean.mean()), float(s_suspect.mean()), ScoreSet(clean=s_clean, poisoned=s_suspect)


@dataclass
class InversionResult:
    r: np.ndarray
    objective: float
    baseline_objective: float
    detected: bool
    converged: bool
    steps_run: int
    residual_to_truth: float | None = None

    @property
    def objective_ratio(self) -> float:
        return self.objective / max(self.baseline_objective, 1e-30)


def invert_trigger(
    model,
    probe_images: np.ndarray,
    target: np.ndarray,
    lambda_reg: float = 1e-3,
    steps: int = 300,
    lr: float = 0.05,
    r0: np.ndarray | None = None,
) -> InversionResult:
    """Reverse-engineer an additive trigger r from a differentiable model.

    ``model`` maps a batch tensor (B, H, W, C) to predictions of the same
    shape. Starting from r = 0, minimizes

        mean |model(x + r) - target|^2  +  lambda_reg * mean |r|

    by adaptive-moment descent over the probe set. Deterministic. Fifty
    consecutive non-improving steps stop the run and mark it non-converged
    (reported, never raised). When the true trigger ``r0`` is known the L2
    residual to it is reported.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    probes = np.asarray(probe_images, dtype=np.float64)
    if probes.ndim != 4:
        raise DataError(f"probe images must be (B, H, W, C), got {probes.shape}")
    target = np.asarray(target, dtype=np.float64)
    target_batch = np.broadcast_to(target, probes.shape).copy()

    def objective(r_t: Tensor) -> Tensor:
        perturbed = Tensor(probes) + r_t.reshape((1,) + r_t.shape)
        pred = model(perturbed)
        err = pred - Tensor(target_batch)
        return (err * err).mean() + lambda_reg * ad.absolute(r_t).mean()

    baseline = float(objective(Tensor(np.zeros(probes.shape[1:]))))

    params = {"r": Tensor(np.zeros(probes.shape[1:]), requires_grad=True)}
    state = AdamState.for_params(params)
    best_obj = baseline
    best_r = np.zeros(probes.shape[1:])
    bad_streak = 0
    converged = True
    step = 0
    for step in range(1, steps + 1):
        tape = GradTape(params)
        loss = objective(tape["r"])
        value = float(loss)
        if value < best_obj:
            best_obj = value
            best_r = np.asarray(tape["r"].data).copy()
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= DIVERGENCE_PATIENCE:
                converged = False
                break
        grads = tape.gradients(loss)
        params, state = adam_step(params, grads, state, lr)

    residual = None
    if r0 is not None:
        r0 = np.asarray(r0, dtype=np.float64)
        residual = float(np.sqrt(np.sum((best_r - r0) ** 2)))
    return InversionResult(
        r=best_r,
        objective=best_obj,
        baseline_objective=baseline,
        detected=best_obj < DETECTION_RATIO * baseline,
        converged=converged,
        steps_run=step,
        residual_to_truth=residual,
    )


def denoiser_model(params: Parameters, config: DenoiserConfig, t: int):
    """Adapt checkpoint parameters to the differentiable map inversion expects."""
    frozen = {k: v.detach() if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}

    def model(x: Tensor) -> Tensor:
        return forward(frozen, x, t, config).prediction

    return model


def _gate_values(params: Parameters, tokens: np.ndarray) -> np.ndarray:
    pooled = tokens.mean(axis=1)
    raw = pooled @ np.asarray(params["gate.w"].data) + np.asarray(params["gate.b"].data)
    return np.tanh(4.0 * raw).reshape(-1)


def unit_activation_gap(
    params: Parameters, config: DenoiserConfig, probe_images: np.ndarray, r: np.ndarray, t: int = 0
) -> np.ndarray:
    """|mean activation difference| per output unit, clean vs triggered probes.

    Units 0..K-1 are the final-block token channels (activation: token mean);
    unit K is the input-gate pathway (activation: the gate value itself).
    """
    probes = np.asarray(probe_images, dtype=np.float64)
    triggered = np.clip(probes + r, 0.0, 1.0)
    clean_tokens = forward(params, probes, t, config).block_tokens[-1].data
    trig_tokens = forward(params, triggered, t, config).block_tokens[-1].data
    gap = np.abs(trig_tokens.mean(axis=(0, 1)) - clean_tokens.mean(axis=(0, 1)))
    gate_gap = abs(
        float(_gate_values(params, trig_tokens).mean()) - float(_gate_values(params, clean_tokens).mean())
    )
    return np.concatenate([gap, [gate_gap]])


def prune_units(
    params: Parameters,
    config: DenoiserConfig,
    r: np.ndarray,
    k: float,
    probe_images: np.ndarray,
) -> tuple[Parameters, np.ndarray]:
    """Zero the k-fraction most trigger-responsive output units.

    A channel unit is silenced by zeroing its outgoing edges (its output-head
    row and its gate-input weight); the gate unit by zeroing the gate pathway.
    k = 1 silences everything, leaving only the constant output bias. Returns
    new parameters and the pruned unit indices, most suspicious first.
    """
    if not 0.0 <= k <= 1.0:
        raise DomainError(f"prune fraction must be in [0, 1], got {k}")
    gap = unit_activation_gap(params, config, probe_images, r)
    n_units = gap.size
    n_prune = int(round(k * n_units))
    order = np.argsort(gap)[::-1]
    chosen = order[:n_prune]
    new_params = dict(params)
    head = np.asarray(params["head.w"].data).copy()
    gate_w = np.asarray(params["gate.w"].data).copy()
    gate_unit = n_units - 1
    channels = np.sort(chosen[chosen != gate_unit])
    head[channels, :] = 0.0
    gate_w[channels, :] = 0.0
    new_params["head.w"] = Tensor(head)
    new_params["gate.w"] = Tensor(gate_w)
    if gate_unit in chosen:
        new_params["gate.w"] = Tensor(np.zeros_like(gate_w))
        new_params["gate.b"] = Tensor(np.zeros(1))
    return new_params, chosen
