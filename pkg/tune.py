"""Scratch tuning harness for the desk-scale defaults (not part of the package)."""
import itertools
import sys
import time

import numpy as np

from rssd.config import default_config
from rssd.training import train, load_training_data
from rssd.evaluate import reconstruct_images
from rssd.metrics import mse, ssim, asr
from rssd.rng import RandomSource


def run(token_dim, lr, d, steps, epochs=30, rate=0.1, variant="badrssd", trig_kind="noise"):
    cfg = default_config()
    cfg.denoiser.token_dim = token_dim
    cfg.training.lr = lr
    cfg.pca.retained = d
    cfg.evaluation.sampler_steps = steps
    cfg.training.epochs = epochs
    cfg.poison.rate = rate
    cfg.poison.variant = variant
    cfg.trigger.kind = trig_kind
    ckpt, rows = train(cfg)

    _, _, ev, _ = load_training_data(cfg)
    ev = ev[: cfg.evaluation.heldout]
    target = cfg.target_image()
    rng = RandomSource(cfg.evaluation.seed).derive("tune")
    clean_recon = reconstruct_images(ckpt, cfg, ev, rng, triggered=False)
    trig_recon = reconstruct_images(ckpt, cfg, ev, rng, triggered=True)
    out = {
        "clean_mse": float(np.mean([mse(r, x) for r, x in zip(clean_recon, ev)])),
        "trig2tgt": float(np.mean([mse(r, target) for r in trig_recon])),
        "clean2tgt": float(np.mean([mse(r, target) for r in clean_recon])),
        "asr": asr(trig_recon, target, 0.6),
        "clean_ssim2tgt": float(np.mean([ssim(r, target) for r in clean_recon])),
    }
    out["ratio"] = out["trig2tgt"] / out["clean2tgt"]
    return cfg, ckpt, out


if __name__ == "__main__":
    for token_dim, lr, d, steps in itertools.product((48, 64), (0.004, 0.008), (8, 16), (4, 8)):
        t0 = time.time()
        cfg, ckpt, m = run(token_dim, lr, d, steps)
        # matched clean run for utility comparison
        cfg2, ckpt2, m2 = run(token_dim, lr, d, steps, rate=0.0)
        print(
            f"K={token_dim} lr={lr} d={d} steps={steps}: "
            f"asr={m['asr']:.3f} trig2tgt={m['trig2tgt']:.4f} clean2tgt={m['clean2tgt']:.4f} "
            f"ratio={m['ratio']:.2f} clean_mse={m['clean_mse']:.4f} cleanrun_mse={m2['clean_mse']:.4f} "
            f"util={m['clean_mse']/max(m2['clean_mse'],1e-9):.2f} ({time.time()-t0:.0f}s)",
            flush=True,
        )
