"""Command-line entry point: ``deepwavenet <command> [options]``.

Exit codes: 0 success, 1 user or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import torch

from .config import ConfigError, RunConfig
from .datasets import IMAGE_EXTENSIONS, load_image, save_image, to_array, to_tensor
from .losses import PerceptualWeightsError
from .metrics import evaluate_folder
from .model import CheckpointError, load_checkpoint, set_deterministic
from .trainer import evaluate, finetune, run_ablation, train

log = logging.getLogger("deepwavenet")

USER_ERRORS = (ConfigError, CheckpointError, PerceptualWeightsError, FileNotFoundError, FileExistsError, ValueError)


def _common(p, config=True):
    if config:
        p.add_argument("--config", required=True, help="run config file (YAML or JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--device")
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--overwrite", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepwavenet", description="Deep WaveNet underwater image restoration")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch on data.train")
    _common(p)
    p.add_argument("--scale", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("finetune", help="continue training a checkpoint on data.train")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="base checkpoint")

    p = sub.add_parser("enhance", help="restore an image or a folder of images")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--scale", type=int, choices=(1, 2, 3, 4), help="must match the checkpoint")
    p.add_argument("--format", choices=("png", "jpg"), default="png")

    p = sub.add_parser("evaluate", help="score a checkpoint on data.test")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help="comma-separated metric names")
    p.add_argument("--output", help="report/image directory (default: output.dir/eval)")

    p = sub.add_parser("ablate", help="run the variant and loss ablation grid")
    _common(p)
    p.add_argument("--output", help="report directory (default: output.dir/ablation)")

    p = sub.add_parser("metrics", help="score a folder of images, no model")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref")
    p.add_argument("--metrics", default="psnr,ssim,mse")
    p.add_argument("--output", required=True, help="report directory")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _guard_output(path, overwrite):
    if os.path.exists(path) and (not os.path.isdir(path) or os.listdir(path)) and not overwrite:
        raise FileExistsError(f"{path} exists and is not empty; pass --overwrite to replace its contents")
    os.makedirs(path, exist_ok=True)


def _load_config(args) -> RunConfig:
    metrics = args.metrics.split(",") if getattr(args, "metrics", None) else None
    cfg = RunConfig.load(args.config).with_overrides(
        seed=args.seed, scale=getattr(args, "scale", None), device=args.device,
        deterministic=args.deterministic, overwrite=args.overwrite, metrics=metrics,
    )
    if cfg.train.deterministic:
        set_deterministic()
    return cfg


def _train_dirs(cfg: RunConfig):
    ckdir = cfg.train.checkpoint_dir or os.path.join(cfg.output_dir, "checkpoints")
    _guard_output(ckdir, cfg.overwrite)
    log_path = cfg.train.log_path or os.path.join(ckdir, "train_log.jsonl")
    return cfg.with_overrides(checkpoint_dir=ckdir), log_path


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.checkpoint:
        cfg.overwrite = True  # resuming writes into the existing checkpoint dir
    cfg, log_path = _train_dirs(cfg)
    tc = replace(cfg.train, log_path=log_path)
    val = cfg.manifest("val") if "val" in cfg.data else None
    result = train(tc, cfg.manifest("train"), val_manifest=val, resume_from=args.checkpoint)
    print(f"trained {result.step} steps; checkpoint {result.checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    cfg, log_path = _train_dirs(cfg)
    tc = replace(cfg.train, log_path=log_path, finetune_from=args.checkpoint)
    val = cfg.manifest("val") if "val" in cfg.data else None
    result = finetune(args.checkpoint, cfg.manifest("train"), tc, val_manifest=val)
    print(f"finetuned {result.step} steps from {args.checkpoint}; checkpoint {result.checkpoint}")
    return 0


def cmd_enhance(args) -> int:
    if args.deterministic:
        set_deterministic()
    model, _ = load_checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != model.config.scale_factor:
        raise ConfigError(f"--scale {args.scale} does not match checkpoint scale {model.config.scale_factor}")
    model.to(args.device or "cpu").eval()
    if os.path.isdir(args.input):
        files = [os.path.join(args.input, n) for n in sorted(os.listdir(args.input))
                 if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS]
    elif os.path.isfile(args.input):
        files = [args.input]
    else:
        raise FileNotFoundError(f"input not found: {args.input}")
    if not files:
        raise ValueError(f"no images in {args.input}")
    _guard_output(args.output, args.overwrite)
    dtype = next(model.parameters()).dtype
    for path in files:
        t0 = time.perf_counter()
        x = to_tensor(load_image(path))[None].to(device=next(model.parameters()).device, dtype=dtype)
        with torch.no_grad():
            y = model(x, clamp=True)[0].cpu()
        stem = os.path.splitext(os.path.basename(path))[0]
        save_image(to_array(y), os.path.join(args.output, f"{stem}.{args.format}"))
        print(f"{os.path.basename(path)}\t{time.perf_counter() - t0:.3f}s")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = args.output or os.path.join(cfg.output_dir, "eval")
    _guard_output(out, cfg.overwrite)
    report = evaluate(args.checkpoint, cfg.manifest("test"), cfg.metrics, out_dir=out)
    print(json.dumps({m: a["mean"] for m, a in report.aggregate().items()}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = args.output or os.path.join(cfg.output_dir, "ablation")
    _guard_output(out, cfg.overwrite)
    eval_split = "test" if "test" in cfg.data else "train"
    report = run_ablation(
        cfg.train, cfg.manifest("train"), cfg.manifest(eval_split),
        variants=cfg.ablation_variants, loss_combos=cfg.ablation_losses,
        metrics=cfg.metrics, out_dir=out,
    )
    sys.stdout.write(report.to_csv())
    return 0


def cmd_metrics(args) -> int:
    _guard_output(args.output, args.overwrite)
    report = evaluate_folder(args.pred, args.ref, args.metrics.split(","), workers=args.workers)
    report.write(args.output)
    for path in report.unmatched:
        print(f"unmatched: {path}", file=sys.stderr)
    sys.stdout.write(report.to_csv())
    return 0


COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
