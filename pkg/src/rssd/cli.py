"""Command-line entry point.

Subcommands:
    train           run a training per the config (clean, attack, or baseline)
    poison-preview  write clean/poisoned/target sample grids as PPM images
    sample          reconstruct held-out images from a checkpoint, +/- trigger
    eval            produce the full metrics report (CSV and text)
    defend          run one defense: pdd | invert | prune
    selftest        run the fast invariant suite

Exit codes: 0 success, 2 usage error, 3 configuration error, 1 anything else.
Output files never embed timestamps, so identical config + seeds reproduce
identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .attack import inject_trigger
from .config import ExperimentConfig, default_config
from .errors import ConfigError, RssdError
from .metrics import mse
from .ppm import tile_grid, write_image
from .rng import RandomSource
from .training import load_checkpoint, load_training_data, train


def _load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else default_config()
    if seed is not None:
        cfg.training.seed = seed
    cfg.validate()
    return cfg


def _write_metrics(rows, out_path: Path) -> None:
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = train(cfg, out_dir=args.out, resume=resume)
    last = rows[-1] if rows else {}
    print(
        f"trained {ckpt.epoch} epochs; "
        f"clean loss {last.get('loss_clean', 0.0):.5f}, "
        f"backdoor loss {last.get('loss_backdoor', 0.0):.5f}; "
        f"checkpoint at {Path(args.out) / 'checkpoint.rssd'}"
    )
    return 0


def cmd_poison_preview(args) -> int:
    from .attack import build_poison_batch

    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_images, _, _, _ = load_training_data(cfg)
    layout = cfg.patch_layout()
    from .codec import fit_pca, patchify

    basis = fit_pca(patchify(train_images, layout).reshape(-1, layout.patch_dim), cfg.pca.retained)
    rng = RandomSource(cfg.training.seed).derive("poison-preview")
    n = min(16, len(train_images))
    batch = build_poison_batch(
        train_images[:n], cfg.poison_spec(), cfg.trigger_spec(), basis, layout,
        cfg.target_image(), rng,
    )
    write_image(out / "clean_grid.ppm", tile_grid(train_images[:n]))
    write_image(out / "poisoned_grid.ppm", tile_grid(batch.images))
    write_image(out / "target.ppm", cfg.target_image())
    print(f"wrote grids to {out} ({batch.poison_count}/{n} samples poisoned)")
    return 0


def cmd_sample(args) -> int:
    from .evaluate import reconstruct_images

    cfg = _load_config(args.config, args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, _, eval_images, _ = load_training_data(cfg)
    n = min(args.count, len(eval_images))
    images = eval_images[:n]
    rng = RandomSource(cfg.evaluation.seed).derive("cli-sample")
    triggered = args.trigger == "on"
    recon = reconstruct_images(ckpt, cfg, images, rng, triggered=triggered)
    write_image(out / "inputs.ppm", tile_grid(inject_trigger(images, cfg.trigger_spec()) if triggered else images))
    write_image(out / "samples.ppm", tile_grid(recon))
    target = cfg.target_image()
    rows = [(f"mse_to_target_{i}", repr(mse(r, target))) for i, r in enumerate(recon)]
    _write_metrics(rows, out / "samples.csv")
    print(f"wrote {n} reconstructions to {out} (trigger {args.trigger})")
    return 0


def cmd_eval(args) -> int:
    from .data import make_labeled_dataset
    from .evaluate import evaluate_checkpoint

    cfg = _load_config(args.config, args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labeled = None
    if cfg.dataset.kind == "synthetic" and cfg.dataset.classes >= 2:
        labeled = make_labeled_dataset(cfg.synthetic_spec(), cfg.dataset.train_size, cfg.dataset.eval_size)
    report = evaluate_checkpoint(ckpt, cfg, labeled=labeled)
    _write_metrics(report.rows(), out / "metrics.csv")
    text = "\n".join(f"{k} = {v}" for k, v in report.rows()) + "\n"
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_defend(args) -> int:
    from .evaluate import run_inversion_defense, run_pdd_defense, run_prune_defense

    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.defense == "pdd":
        result = run_pdd_defense(cfg)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        if args.defense == "invert":
            result = run_inversion_defense(ckpt, cfg)
        else:
            result = run_prune_defense(ckpt, cfg, k=args.k)
    rows = result.report.rows() + [
        (f"extra_{k}", str(v)) for k, v in sorted(result.extra.items()) if not isinstance(v, list)
    ]
    _write_metrics(rows, out / f"defense_{result.name}.csv")
    for k, v in rows:
        print(f"{k} = {v}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(verbose=True)
    print(f"selftest: {'ok' if failures == 0 else f'{failures} failure(s)'}")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rssd", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="experiment config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override training.seed")
        p.add_argument("--out", default="out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")

    p = sub.add_parser("train", help="train per config")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("poison-preview", help="write poisoned/clean sample grids")
    common(p)
    p.set_defaults(fn=cmd_poison_preview)

    p = sub.add_parser("sample", help="reconstruct images from a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--trigger", choices=("on", "off"), default="off")
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="full metrics report")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("defend", help="run a defense")
    common(p)
    p.add_argument("--defense", choices=("pdd", "invert", "prune"), required=True)
    p.add_argument("--checkpoint", help="checkpoint file (invert/prune)")
    p.add_argument("--k", type=float, default=0.25, help="prune fraction")
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("selftest", help="run the fast invariant suite")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "defend" and args.defense in ("invert", "prune") and not args.checkpoint:
        print("error: usage: --checkpoint is required for invert/prune", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 3
    except RssdError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
