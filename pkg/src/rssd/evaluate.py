"""End-to-end measurement: reports, the linear probe, and defense runs.

Feature convention: an image's evaluation feature vector is the concatenation
of its truncated per-patch latents (flattened) and the denoiser's pooled
mid-block token features at t = 0. Both halves are self-contained, so the
moment-matching distance stays computable without any pretrained network;
outputs label it proxy-FID throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attack import inject_trigger
from .autodiff import GradTape, Tensor
from .codec import encode, patchify
from .config import ExperimentConfig
from .data import LabeledDataset
from .defenses import denoiser_model, invert_trigger, pdd_detect, prune_units
from .denoiser import forward
from .errors import DataError
from .metrics import MetricsReport, ScoreSet, asr, auroc, mse, proxy_fid, ssim, tpr_at_fpr
from .optim import AdamState, adam_step
from .rng import RandomSource
from .sampling import reconstruct
from .training import Checkpoint, load_training_data


def eval_features(ckpt: Checkpoint, cfg: ExperimentConfig, images: np.ndarray) -> np.ndarray:
    """Per-image feature vectors: truncated latents + pooled block features."""
    layout = cfg.patch_layout()
    dcfg = cfg.denoiser_config()
    params = ckpt.param_tensors()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    latents = np.asarray(encode(patchify(images, layout), ckpt.basis, full=False))
    pooled = forward(params, images, 0, dcfg).pooled.data
    return np.concatenate([latents.reshape(len(images), -1), pooled], axis=1)


def reconstruct_images(
    ckpt: Checkpoint,
    cfg: ExperimentConfig,
    images: np.ndarray,
    rng: RandomSource,
    triggered: bool = False,
) -> np.ndarray:
    """Sampler-based reconstruction of a batch, optionally through the trigger path."""
    inputs = np.asarray(images, dtype=np.float64)
    align_to = None
    if triggered:
        inputs = inject_trigger(inputs, cfg.trigger_spec())
        if cfg.poison.alignment == "train-and-inference" and cfg.poison.variant == "badrssd":
            layout = cfg.patch_layout()
            align_to = np.asarray(encode(patchify(cfg.target_image(), layout), ckpt.basis, full=True))
    return reconstruct(
        ckpt.param_tensors(),
        cfg.denoiser_config(),
        ckpt.basis,
        cfg.noise_schedule(),
        inputs,
        cfg.evaluation.sampler_steps,
        rng,
        align_to=align_to,
    )


def evaluate_checkpoint(
    ckpt: Checkpoint,
    cfg: ExperimentConfig,
    eval_images: np.ndarray | None = None,
    labeled: LabeledDataset | None = None,
) -> MetricsReport:
    """Full quality/attack report on the held-out split (or provided images)."""
    if eval_images is None:
        _, _, eval_images, _ = load_training_data(cfg)
    eval_images = np.asarray(eval_images, dtype=np.float64)
    n = min(cfg.evaluation.heldout, len(eval_images))
    if n < 2:
        raise DataError(f"need at least 2 evaluation images, got {n}")
    eval_images = eval_images[:n]
    target = cfg.target_image()
    rng = RandomSource(cfg.evaluation.seed).derive("evaluate")

    clean_recon = reconstruct_images(ckpt, cfg, eval_images, rng, triggered=False)
    trig_recon = reconstruct_images(ckpt, cfg, eval_images, rng, triggered=True)

    report = MetricsReport(tau_asr=cfg.evaluation.tau_asr)
    report.clean_mse = float(np.mean([mse(r, x) for r, x in zip(clean_recon, eval_images)]))
    report.proxy_fid_clean = proxy_fid(
        eval_features(ckpt, cfg, eval_images), eval_features(ckpt, cfg, clean_recon)
    )
    report.mse_to_target = float(np.mean([mse(r, target) for r in trig_recon]))
    report.ssim_to_target = float(np.mean([ssim(r, target) for r in trig_recon]))
    report.asr = asr(trig_recon, target, cfg.evaluation.tau_asr)

    if labeled is not None:
        ca, ba, probe_asr = linear_probe(ckpt, cfg, labeled, cfg.trigger_spec())
        report.clean_accuracy = ca
        report.backdoor_accuracy = ba
        report.probe_asr = probe_asr
    return report


# ---- linear probe ----


def _train_softmax_probe(features: np.ndarray, labels: np.ndarray, classes: int, steps: int = 250, lr: float = 0.1):
    mu = features.mean(axis=0)
    sd = np.maximum(features.std(axis=0), 1e-8)
    x = (features - mu) / sd
    onehot = np.eye(classes)[labels]
    params = {
        "w": Tensor(np.zeros((x.shape[1], classes)), requires_grad=True),
        "b": Tensor(np.zeros(classes), requires_grad=True),
    }
    state = AdamState.for_params(params)
    for _ in range(steps):
        tape = GradTape(params)
        logits = Tensor(x) @ tape["w"] + tape["b"]
        shift = logits - logits.data.max(axis=1, keepdims=True)
        log_norm = ad.log(ad.exp(shift).sum(axis=1))
        picked = (shift * onehot).sum(axis=1)
        loss = (log_norm - picked).mean()
        grads = tape.gradients(loss)
        params, state = adam_step(params, grads, state, lr)

    w = np.asarray(params["w"].data)
    b = np.asarray(params["b"].data)

    def predict(feats: np.ndarray) -> np.ndarray:
        z = (feats - mu) / sd
        return np.argmax(z @ w + b, axis=1)

    return predict


def linear_probe(
    ckpt: Checkpoint, cfg: ExperimentConfig, dataset: LabeledDataset, trigger
) -> tuple[float, float, float]:
    """Clean accuracy, backdoor accuracy, and probe-level attack success.

    A softmax probe is trained on pooled block features of clean training
    images. CA scores clean test inputs; BA scores triggered test inputs
    against their true labels. Probe-ASR is the fraction of triggered inputs
    whose feature lands nearer the target image's feature than any class
    centroid.
    """
    classes = int(dataset.train_labels.max()) + 1 if len(dataset.train_labels) else 0
    if classes < 2:
        raise DataError(f"linear probe needs >= 2 classes, got {classes}")

    feats_train = eval_features(ckpt, cfg, dataset.train_images)
    feats_test = eval_features(ckpt, cfg, dataset.test_images)
    triggered = inject_trigger(dataset.test_images, trigger) if trigger is not None else dataset.test_images
    feats_trig = eval_features(ckpt, cfg, triggered)

    predict = _train_softmax_probe(feats_train, dataset.train_labels, classes)
    ca = float(np.mean(predict(feats_test) == dataset.test_labels))
    ba = float(np.mean(predict(feats_trig) == dataset.test_labels))

    centroids = np.stack(
        [feats_train[dataset.train_labels == c].mean(axis=0) for c in range(classes)]
    )
    target_feat = eval_features(ckpt, cfg, cfg.target_image()[None])[0]
    anchors = np.vstack([centroids, target_feat])
    dists = np.linalg.norm(feats_trig[:, None, :] - anchors[None, :, :], axis=2)
    probe_asr = float(np.mean(np.argmin(dists, axis=1) == classes))
    return ca, ba, probe_asr


# ---- defense runs ----


@dataclass
class DefenseReport:
    name: str
    report: MetricsReport
    extra: dict


def run_pdd_defense(cfg: ExperimentConfig, n: int = 200) -> DefenseReport:
    """Detector scores on fresh clean inputs vs triggered inputs of this config."""
    from .data import gen_synthetic

    spec = cfg.synthetic_spec()
    spec = type(spec)(side=spec.side, channels=spec.channels, classes=spec.classes, seed=spec.seed + 9091)
    images, _ = gen_synthetic(spec, 2 * n)
    clean_ref = images[:n]
    triggered = inject_trigger(images[n:], cfg.trigger_spec())
    pdd_clean, pdd_poison, scores = pdd_detect(clean_ref, triggered)
    report = MetricsReport(tau_asr=cfg.evaluation.tau_asr)
    report.pdd_clean = pdd_clean
    report.pdd_poison = pdd_poison
    report.detect_auroc = auroc(scores)
    report.tpr_at_1fpr = tpr_at_fpr(scores, 0.01)
    report.detection_pass_rate = 1.0 - report.tpr_at_1fpr
    return DefenseReport(name="pdd", report=report, extra={"n": n})


def run_inversion_defense(
    ckpt: Checkpoint,
    cfg: ExperimentConfig,
    lambda_reg: float = 1e-3,
    steps: int = 300,
    lr: float = 0.05,
    true_trigger: np.ndarray | None = None,
) -> DefenseReport:
    """Invert a trigger from the checkpoint, then measure mitigation by subtraction."""
    _, _, eval_images, _ = load_training_data(cfg)
    n = min(cfg.evaluation.heldout, len(eval_images))
    eval_images = np.asarray(eval_images[:n], dtype=np.float64)
    target = cfg.target_image()
    probe = eval_images[: min(16, n)]

    t_probe = max(1, cfg.schedule.horizon // 20)
    model = denoiser_model(ckpt.param_tensors(), cfg.denoiser_config(), t_probe)
    result = invert_trigger(model, probe, target, lambda_reg=lambda_reg, steps=steps, lr=lr, r0=true_trigger)

    rng = RandomSource(cfg.evaluation.seed).derive("defense-invert")
    triggered = inject_trigger(eval_images, cfg.trigger_spec())
    recon_before = _reconstruct_raw(ckpt, cfg, triggered, rng)
    mitigated = np.clip(triggered - result.r, 0.0, 1.0)
    recon_after = _reconstruct_raw(ckpt, cfg, mitigated, rng)

    clean_before = _reconstruct_raw(ckpt, cfg, eval_images, rng)
    clean_after = _reconstruct_raw(ckpt, cfg, np.clip(eval_images - result.r, 0.0, 1.0), rng)

    report = MetricsReport(tau_asr=cfg.evaluation.tau_asr)
    report.asr_before = asr(recon_before, target, cfg.evaluation.tau_asr)
    report.asr_after = asr(recon_after, target, cfg.evaluation.tau_asr)
    real_feats = eval_features(ckpt, cfg, eval_images)
    fid_before = proxy_fid(real_feats, eval_features(ckpt, cfg, clean_before))
    fid_after = proxy_fid(real_feats, eval_features(ckpt, cfg, clean_after))
    report.delta_fid = fid_after - fid_before
    report.delta_ssim = float(
        np.mean([ssim(r, target) for r in recon_after]) - np.mean([ssim(r, target) for r in recon_before])
    )
    if result.residual_to_truth is not None:
        report.trigger_residual = result.residual_to_truth
    return DefenseReport(
        name="invert",
        report=report,
        extra={
            "objective": result.objective,
            "baseline_objective": result.baseline_objective,
            "objective_ratio": result.objective_ratio,
            "detected": result.detected,
            "converged": result.converged,
            "steps_run": result.steps_run,
        },
    )


def run_prune_defense(
    ckpt: Checkpoint, cfg: ExperimentConfig, k: float, r: np.ndarray | None = None
) -> DefenseReport:
    """Prune trigger-responsive channels (using r, or the true trigger as stand-in)."""
    _, _, eval_images, _ = load_training_data(cfg)
    n = min(cfg.evaluation.heldout, len(eval_images))
    eval_images = np.asarray(eval_images[:n], dtype=np.float64)
    target = cfg.target_image()
    if r is None:
        trig = cfg.trigger_spec()
        r = inject_trigger(np.zeros((1,) + eval_images.shape[1:]), trig, clamp=False)[0]

    params = ckpt.param_tensors()
    dcfg = cfg.denoiser_config()
    pruned_params, pruned_idx = prune_units(params, dcfg, r, k, eval_images[: min(16, n)])
    pruned_ckpt = Checkpoint(
        version=ckpt.version,
        params={key: np.asarray(v.data) for key, v in pruned_params.items()},
        opt_state=ckpt.opt_state,
        basis=ckpt.basis,
        config_text=ckpt.config_text,
        epoch=ckpt.epoch,
        rng_counter=ckpt.rng_counter,
    )

    rng = RandomSource(cfg.evaluation.seed).derive("defense-prune")
    triggered = inject_trigger(eval_images, cfg.trigger_spec())
    recon_before = _reconstruct_raw(ckpt, cfg, triggered, rng)
    recon_after = _reconstruct_raw(pruned_ckpt, cfg, triggered, rng)
    clean_before = _reconstruct_raw(ckpt, cfg, eval_images, rng)
    clean_after = _reconstruct_raw(pruned_ckpt, cfg, eval_images, rng)

    report = MetricsReport(tau_asr=cfg.evaluation.tau_asr)
    report.asr_before = asr(recon_before, target, cfg.evaluation.tau_asr)
    report.asr_after = asr(recon_after, target, cfg.evaluation.tau_asr)
    real_feats = eval_features(ckpt, cfg, eval_images)
    report.delta_fid = proxy_fid(real_feats, eval_features(ckpt, cfg, clean_after)) - proxy_fid(
        real_feats, eval_features(ckpt, cfg, clean_before)
    )
    report.delta_ssim = float(
        np.mean([ssim(r_, target) for r_ in recon_after]) - np.mean([ssim(r_, target) for r_ in recon_before])
    )
    return DefenseReport(
        name="prune", report=report, extra={"k": k, "pruned_units": pruned_idx.tolist()}
    )


def _reconstruct_raw(ckpt: Checkpoint, cfg: ExperimentConfig, images: np.ndarray, rng: RandomSource) -> np.ndarray:
    return reconstruct(
        ckpt.param_tensors(),
        cfg.denoiser_config(),
        ckpt.basis,
        cfg.noise_schedule(),
        images,
        cfg.evaluation.sampler_steps,
        rng,
    )
