"""Conditional training loop, checkpointing, and the experiment runner.

Every batch is assembled by the attack module, then routed through one of two
recipes per sample type: clean samples minimize the self-supervised loss plus
the dispersion regularizer; poisoned samples minimize the backdoor triple
loss against the target. Both groups share one forward pass and one batch-wise
dispersion term (stealth is a property of the joint batch), and one optimizer
step is taken on the joint per-sample mean.

Training is a pure function of (config, seeds): all randomness flows through
one counter-based stream whose position is checkpointed, so a resumed run
continues bit-identically.

Checkpoint format (little-endian):

    magic "RSSD" | u32 version | u64 config-text length | config utf-8 bytes
    u64 tensor count | per tensor: u64 name length, name utf-8, u32 ndim,
    u64 dims..., float64 data

Tensors are written in sorted-name order; scalars (epoch counter, optimizer
step, stream position) are 0-d tensors under the ``state.`` prefix.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attack import PoisonBatch, build_poison_batch, inject_trigger
from .autodiff import GradTape, Tensor
from .codec import PatchLayout, PcaBasis, decode, encode, fit_pca, patchify, unpatchify
from .config import ExperimentConfig
from .data import gen_synthetic, load_cifar10
from .denoiser import DenoiserConfig, Parameters, forward, init_params
from .diffusion import NoiseSchedule, gamma, sigma, uniform_timestep
from .errors import (
    CorruptHeaderError,
    CorruptionError,
    DataError,
    NumericError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    backdoor_loss,
    dispersion_loss,
    image_reconstruction_loss,
    pca_trajectory_loss,
    rssd_loss,
    ssl_loss,
)
from .optim import AdamState, adam_step
from .rng import RandomSource
from .sampling import reconstruct

CHECKPOINT_MAGIC = b"RSSD"
CHECKPOINT_VERSION = 1


@dataclass
class TrainContext:
    """Everything one optimization step needs besides the batch."""

    layout: PatchLayout
    basis: PcaBasis
    schedule: NoiseSchedule
    weights: LossWeights
    denoiser: DenoiserConfig
    variant: str
    alignment: str
    lr: float


@dataclass
class Checkpoint:
    version: int
    params: dict[str, np.ndarray]
    opt_state: AdamState
    basis: PcaBasis
    config_text: str
    epoch: int
    rng_counter: int

    def config(self) -> ExperimentConfig:
        return ExperimentConfig.from_text(self.config_text)

    def param_tensors(self, requires_grad: bool = False) -> Parameters:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}


def train_step(
    params: Parameters,
    opt_state: AdamState,
    batch: PoisonBatch,
    ctx: TrainContext,
    rng: RandomSource,
) -> tuple[Parameters, AdamState, dict[str, LossBreakdown]]:
    """One conditional optimization step on a mixed batch.

    Returns updated parameters/state and the per-sample-type loss breakdown.
    Draw order from ``rng`` is fixed (timestep, input noise, trajectory noise)
    so steps replay exactly.
    """
    images = batch.images
    b = images.shape[0]
    if b < 1:
        raise DataError("empty batch")
    flags = batch.poisoned
    clean_idx = np.nonzero(~flags)[0]
    pois_idx = np.nonzero(flags)[0]
    n_c, n_p = len(clean_idx), len(pois_idx)

    t = uniform_timestep(ctx.schedule, rng)
    g_t, s_t = gamma(ctx.schedule, t), sigma(ctx.schedule, t)

    # input pathway: noised full-rotation latents, decoded back to pixels
    z0 = np.asarray(encode(patchify(images, ctx.layout), ctx.basis, full=True))
    if ctx.alignment == "train-and-inference" and ctx.variant == "badrssd" and n_p:
        z0[pois_idx] = batch.aligned_latents
    eps_in = rng.normal(z0.shape)
    eps_pair = rng.normal((n_p,) + batch.target_latents.shape) if n_p else None
    z_t = g_t * z0 + s_t * eps_in
    x_t = np.asarray(unpatchify(decode(z_t, ctx.basis), ctx.layout))

    tape = GradTape(params)
    trace = forward(tape.params, x_t, t, ctx.denoiser)

    w = ctx.weights
    use_disp = ctx.variant == "badrssd"
    disp = dispersion_loss(trace.pooled, w.tau) if (use_disp and b >= 2) else None

    breakdowns: dict[str, LossBreakdown] = {}
    total = None

    if n_c:
        pred_c = trace.prediction[clean_idx]
        ssl = ssl_loss(
            patchify(Tensor(images[clean_idx]), ctx.layout),
            patchify(pred_c, ctx.layout),
            ctx.basis,
            t,
            ctx.schedule,
            w,
        )
        clean_total = rssd_loss(ssl, disp, w.lambda_disp) if disp is not None else ssl
        breakdowns["clean"] = LossBreakdown(
            sample_type="clean",
            total=float(clean_total),
            ssl=float(ssl),
            disp=float(disp) if disp is not None else 0.0,
        )
        total = clean_total * (n_c / b)

    if n_p:
        pred_p = trace.prediction[pois_idx]
        target_imgs = np.broadcast_to(batch.target_image, images[pois_idx].shape)
        img_rec = image_reconstruction_loss(Tensor(target_imgs.copy()), pred_p)
        if ctx.variant == "badrssd":
            z0_pred = encode(patchify(pred_p, ctx.layout), ctx.basis, full=True)
            zt_pred = z0_pred * g_t + Tensor(eps_pair * s_t)
            z_targets = batch.aligned_latents
            zt_target = g_t * z_targets + s_t * eps_pair
            static, traj, combined = pca_trajectory_loss(
                z0_pred, Tensor(z_targets), zt_pred, Tensor(zt_target), t, ctx.schedule, w
            )
            pois_total = backdoor_loss(combined, img_rec, disp, w)
            breakdowns["poisoned"] = LossBreakdown(
                sample_type="poisoned",
                total=float(pois_total),
                disp=float(disp),
                pca_static=float(static),
                pca_trajectory=float(traj),
                img_rec=float(img_rec),
            )
        else:  # pixel baseline: plain target reconstruction, nothing else
            pois_total = img_rec
            breakdowns["poisoned"] = LossBreakdown(
                sample_type="poisoned", total=float(img_rec), img_rec=float(img_rec)
            )
        part = pois_total * (n_p / b)
        total = part if total is None else total + part

    if total is None:
        raise DataError("batch contained neither clean nor poisoned samples")
    if not np.isfinite(float(total)):
        raise NumericError(f"training loss went non-finite at t={t}")

    grads = tape.gradients(total)
    new_params, new_state = adam_step(tape.params, grads, opt_state, ctx.lr)
    return new_params, new_state, breakdowns


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then half-cycle cosine decay to zero."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def load_training_data(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(train_images, train_labels, eval_images, eval_labels) per the config."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        images, labels = gen_synthetic(cfg.synthetic_spec(), ds.train_size + ds.eval_size)
    else:
        root = Path(cfg.data_dir())
        batches = sorted(root.glob("data_batch_*.bin")) or sorted(root.glob("*.bin"))
        if not batches:
            raise DataError(f"no CIFAR-10 batch files under {root}")
        images, labels = load_cifar10(batches)
        if len(images) < ds.train_size + ds.eval_size:
            raise DataError(
                f"need {ds.train_size + ds.eval_size} images, found {len(images)}"
            )
        images = images[: ds.train_size + ds.eval_size]
        labels = labels[: ds.train_size + ds.eval_size]
    return (
        images[: ds.train_size],
        labels[: ds.train_size],
        images[ds.train_size :],
        labels[ds.train_size :],
    )


TRAIN_LOG_COLUMNS = ("epoch", "lr", "loss_clean", "loss_backdoor", "probe_clean_mse", "probe_target_mse")


def train(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after_epochs: int | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run (or continue) a full training; returns the checkpoint and epoch log.

    ``stop_after_epochs`` halts early without changing the learning-rate
    schedule, so a stopped-and-resumed run is bitwise identical to an
    uninterrupted one.
    """
    cfg.validate()
    layout = cfg.patch_layout()
    schedule = cfg.noise_schedule()
    weights = cfg.loss_weights()
    dcfg = cfg.denoiser_config()
    trigger = cfg.trigger_spec()
    poison = cfg.poison_spec()
    target_image = cfg.target_image()

    train_images, _, eval_images, _ = load_training_data(cfg)
    basis = fit_pca(patchify(train_images, layout).reshape(-1, layout.patch_dim), cfg.pca.retained)

    if resume is not None:
        params: Parameters = resume.param_tensors()
        opt_state = resume.opt_state
        rng = RandomSource(cfg.training.seed, counter=resume.rng_counter)
        start_epoch = resume.epoch
        basis = resume.basis
    else:
        params = init_params(dcfg, cfg.denoiser.init_seed)
        opt_state = AdamState.for_params(params)
        rng = RandomSource(cfg.training.seed)
        start_epoch = 0

    n_train = len(train_images)
    batch_size = cfg.training.batch
    steps_per_epoch = n_train // batch_size
    if steps_per_epoch < 1:
        raise DataError(f"train size {n_train} smaller than batch {batch_size}")
    total_epochs = cfg.training.epochs
    total_steps = total_epochs * steps_per_epoch
    warmup_steps = cfg.training.warmup_epochs * steps_per_epoch
    target_epoch = total_epochs if stop_after_epochs is None else min(total_epochs, stop_after_epochs)

    probe_images = eval_images[: min(8, len(eval_images))]
    log_rows: list[dict] = []

    epoch = start_epoch
    for epoch in range(start_epoch + 1, target_epoch + 1):
        perm = rng.permutation(n_train)
        clean_sum = clean_n = pois_sum = pois_n = 0.0
        lr = cfg.training.lr
        for s in range(steps_per_epoch):
            idx = perm[s * batch_size : (s + 1) * batch_size]
            batch = build_poison_batch(
                train_images[idx], poison, trigger, basis, layout, target_image, rng
            )
            step_index = (epoch - 1) * steps_per_epoch + s
            lr = lr_at(step_index, total_steps, cfg.training.lr, warmup_steps)
            ctx = TrainContext(
                layout=layout,
                basis=basis,
                schedule=schedule,
                weights=weights,
                denoiser=dcfg,
                variant=poison.variant,
                alignment=poison.alignment,
                lr=lr,
            )
            params, opt_state, breakdown = train_step(params, opt_state, batch, ctx, rng)
            if "clean" in breakdown:
                clean_sum += breakdown["clean"].total
                clean_n += 1
            if "poisoned" in breakdown:
                pois_sum += breakdown["poisoned"].total
                pois_n += 1

        probe = _probe_metrics(params, dcfg, basis, schedule, probe_images, trigger, target_image, cfg, epoch)
        log_rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss_clean": clean_sum / clean_n if clean_n else 0.0,
                "loss_backdoor": pois_sum / pois_n if pois_n else 0.0,
                "probe_clean_mse": probe[0],
                "probe_target_mse": probe[1],
            }
        )

    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        params={k: np.asarray(v.data) for k, v in params.items()},
        opt_state=opt_state,
        basis=basis,
        config_text=cfg.to_text(),
        epoch=epoch,
        rng_counter=rng.counter,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out / "checkpoint.rssd")
        write_train_log(log_rows, out / "train_log.csv")
        cfg.save(out / "config.ini")
    return ckpt, log_rows


def _probe_metrics(params, dcfg, basis, schedule, probe_images, trigger, target_image, cfg, epoch):
    """Cheap per-epoch quality probes: clean-recon MSE and triggered-to-target MSE."""
    if len(probe_images) == 0:
        return 0.0, 0.0
    rng = RandomSource(cfg.evaluation.seed).derive(f"probe-{epoch}")
    steps = min(4, cfg.evaluation.sampler_steps)
    recon = reconstruct(params, dcfg, basis, schedule, probe_images, steps, rng)
    clean_mse = float(np.mean((recon - probe_images) ** 2))
    triggered = inject_trigger(probe_images, trigger)
    recon_t = reconstruct(params, dcfg, basis, schedule, triggered, steps, rng)
    target_mse = float(np.mean((recon_t - target_image) ** 2))
    return clean_mse, target_mse


def write_train_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---- checkpoint serialization ----


def _checkpoint_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in ckpt.opt_state.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in ckpt.opt_state.v.items():
        tensors[f"opt.v.{name}"] = arr
    tensors["pca.v"] = ckpt.basis.v
    tensors["pca.mean"] = ckpt.basis.mean
    tensors["pca.variances"] = ckpt.basis.variances
    tensors["pca.d"] = np.float64(ckpt.basis.d)
    tensors["pca.degenerate"] = np.float64(1.0 if ckpt.basis.degenerate else 0.0)
    tensors["state.epoch"] = np.float64(ckpt.epoch)
    tensors["state.opt_step"] = np.float64(ckpt.opt_state.step)
    tensors["state.rng_counter"] = np.float64(ckpt.rng_counter)
    return tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the documented little-endian binary layout; see module docstring."""
    tensors = _checkpoint_tensors(ckpt)
    config_bytes = ckpt.config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<Q", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<Q", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.read(8))[0]


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.read(4) != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, this build reads {CHECKPOINT_VERSION}")
    config_text = r.read(r.u64()).decode("utf-8")
    count = r.u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.read(r.u64()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        n_elems = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.read(8 * n_elems), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - r.pos} trailing bytes after payload")

    def pop_scalar(name: str) -> float:
        if name not in tensors:
            raise CorruptionError(f"{path}: missing required entry {name!r}")
        return float(tensors.pop(name))

    d = int(pop_scalar("pca.d"))
    degenerate = pop_scalar("pca.degenerate") != 0.0
    epoch = int(pop_scalar("state.epoch"))
    opt_step = int(pop_scalar("state.opt_step"))
    rng_counter = int(pop_scalar("state.rng_counter"))
    for key in ("pca.v", "pca.mean", "pca.variances"):
        if key not in tensors:
            raise CorruptionError(f"{path}: missing required entry {key!r}")
    basis = PcaBasis(
        v=tensors.pop("pca.v"),
        mean=tensors.pop("pca.mean"),
        d=d,
        variances=tensors.pop("pca.variances"),
        degenerate=degenerate,
    )
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("opt.m."):
            opt_m[name[len("opt.m.") :]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[len("opt.v.") :]] = arr
        else:
            raise CorruptionError(f"{path}: unrecognized entry {name!r}")
    if set(params) != set(opt_m) or set(params) != set(opt_v):
        raise CorruptionError(f"{path}: parameter and optimizer entries disagree")
    return Checkpoint(
        version=version,
        params=params,
        opt_state=AdamState(step=opt_step, m=opt_m, v=opt_v),
        basis=basis,
        config_text=config_text,
        epoch=epoch,
        rng_counter=rng_counter,
    )
