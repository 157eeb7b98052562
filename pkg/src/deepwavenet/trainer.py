"""Optimization loop, checkpointing, evaluation and the ablation grid.

Batch order is a pure function of ``(seed, epoch)``, so a run resumed from
a checkpoint at step ``t`` replays exactly the batches the uninterrupted
run would have seen.

Training length can be given as ``max_steps``, ``max_epochs`` or both;
whichever limit is reached first stops training. With 11435 EUVP pairs and
batch size 5 one epoch is 2287 steps.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import metrics as uw_metrics
from .datasets import DatasetManifest, PairedImageDataset, save_image, to_array
from .losses import CompositeLoss, LossWeights, VGGFeatureExtractor
from .model import (
    DeepWaveNet,
    ModelConfig,
    Variant,
    check_compatible,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 5
    max_steps: int | None = None
    max_epochs: int | None = 1
    schedule: str = "constant"  # or "cosine"
    eval_every: int = 0  # 0 disables validation
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None
    seed: int = 0
    finetune_from: str | None = None
    perceptual_weights: str | None = None
    device: str = "cpu"
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps is None and self.max_epochs is None:
            raise ValueError("set max_steps or max_epochs")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: DeepWaveNet
    log: list[dict]
    step: int
    checkpoint: str | None = None
    best_checkpoint: str | None = None
    best_val_psnr: float | None = None


def make_loss(config: TrainConfig, extractor=None) -> CompositeLoss:
    if config.loss.lambda_p > 0 and extractor is None:
        extractor = VGGFeatureExtractor.from_file(config.perceptual_weights)
    return CompositeLoss(config.loss, extractor if config.loss.lambda_p > 0 else None)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Indices used at 1-based ``step``; the last batch of an epoch may be short."""
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step - 1, per_epoch)
    return epoch_order(seed, epoch, n)[k * batch_size : (k + 1) * batch_size]


def total_steps(config: TrainConfig, n: int) -> int:
    per_epoch = math.ceil(n / config.batch_size)
    limits = []
    if config.max_steps is not None:
        limits.append(config.max_steps)
    if config.max_epochs is not None:
        limits.append(config.max_epochs * per_epoch)
    return min(limits)


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.schedule == "cosine" and total > 0:
        return 0.5 * config.lr * (1 + math.cos(math.pi * (step - 1) / total))
    return config.lr


def _ckpt_path(config: TrainConfig, name: str) -> str | None:
    if config.checkpoint_dir is None:
        return None
    return os.path.join(config.checkpoint_dir, name)


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    val_manifest: DatasetManifest | None = None,
    resume_from: str | None = None,
    extractor: VGGFeatureExtractor | None = None,
    model: DeepWaveNet | None = None,
    dataset: PairedImageDataset | None = None,
) -> TrainResult:
    """Minimize ``L2 + lambda_p * L_P + lambda_s * L_SSIM`` with Adam.

    ``resume_from`` restores model, optimizer and step counter from a
    checkpoint written by this function. ``model`` supplies initial weights
    (used by :func:`finetune`).
    """
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    device = torch.device(config.device)
    loss_fn = make_loss(config, extractor).to(device)
    dataset = dataset or PairedImageDataset(manifest)

    if model is None:
        model = DeepWaveNet(config.model)
    check_compatible(model.config, config.model, "initial model")
    model.to(device)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    start = 0
    history: list[dict] = []
    best = (None, -math.inf)
    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        check_compatible(ModelConfig.from_dict(payload["config"]), config.model, resume_from)
        model.load_state_dict(payload["state_dict"])
        if "optimizer" in payload:
            opt.load_state_dict(payload["optimizer"])
        start = int(payload.get("step", 0))
        history = list(payload.get("history", []))

    n = len(dataset)
    last = total_steps(config, n)
    log_file = None
    if config.log_path:
        os.makedirs(os.path.dirname(os.path.abspath(config.log_path)), exist_ok=True)
        log_file = open(config.log_path, "a" if resume_from else "w")
    t0 = time.perf_counter()
    ckpt = None
    try:
        for step in range(start + 1, last + 1):
            model.train()
            idx = batch_indices(config.seed, step, n, config.batch_size)
            deg, ref = dataset.batch(idx)
            deg, ref = deg.to(device), ref.to(device)
            lr = _lr_at(config, step, last)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            terms = loss_fn.terms(model(deg), ref)
            if not torch.isfinite(terms["total"]):
                ids = [manifest.records[int(i)].image_id for i in idx]
                raise NonFiniteLossError(f"non-finite loss at step {step} on batch {ids}")
            terms["total"].backward()
            opt.step()

            entry = {
                "step": step,
                "l2": terms["l2"].item(),
                "lp": terms["lp"].item() if "lp" in terms else 0.0,
                "lssim": terms["lssim"].item() if "lssim" in terms else 0.0,
                "total": terms["total"].item(),
                "lr": lr,
                "wall_time": time.perf_counter() - t0,
            }
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()

            if val_manifest is not None and config.eval_every and step % config.eval_every == 0:
                score = evaluate_model(model, val_manifest, ("psnr",)).mean("psnr")
                log.info("step %d val psnr %.3f", step, score)
                if score > best[1] and config.checkpoint_dir:
                    best = (_ckpt_path(config, "best.pt"), score)
                    _save(model, opt, step, history, config, best[0], val_psnr=score)
            if config.checkpoint_every and step % config.checkpoint_every == 0 and config.checkpoint_dir:
                _save(model, opt, step, history, config, _ckpt_path(config, f"step_{step:07d}.pt"))
    finally:
        if log_file:
            log_file.close()

    final_step = max(start, last)
    if config.checkpoint_dir:
        ckpt = _ckpt_path(config, "final.pt")
        _save(model, opt, final_step, history, config, ckpt)
    return TrainResult(model, history, final_step, ckpt, best[0], best[1] if best[0] else None)


def _save(model, opt, step, history, config, path, **extra):
    save_checkpoint(
        model,
        path,
        optimizer=opt.state_dict(),
        step=step,
        history=history,
        train_config=json.dumps(config.to_dict()),
        **extra,
    )


def finetune(base_checkpoint, manifest: DatasetManifest, config: TrainConfig, **kwargs) -> TrainResult:
    """Continue training from ``base_checkpoint`` on a new dataset with a fresh optimizer."""
    model, _ = load_checkpoint(base_checkpoint, expected=config.model)
    return train(config, manifest, model=model, **kwargs)


def enhance(model: DeepWaveNet, batch: torch.Tensor) -> torch.Tensor:
    """Inference-mode forward pass; outputs clamped to [0, 1]."""
    model.eval()
    with torch.no_grad():
        return model(batch, clamp=True)


def evaluate_model(
    model: DeepWaveNet,
    manifest: DatasetManifest,
    metrics=("psnr", "ssim", "mse"),
    out_dir=None,
    batch_size: int = 4,
    dataset: PairedImageDataset | None = None,
) -> uw_metrics.MetricReport:
    """Run the model over ``manifest`` and score the clamped outputs against the references."""
    dataset = dataset or PairedImageDataset(manifest, cache=False)
    report = uw_metrics.MetricReport(list(metrics), metadata={"dataset": manifest.name, "scale": model.config.scale_factor})
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    for lo in range(0, len(dataset), batch_size):
        idx = range(lo, min(lo + batch_size, len(dataset)))
        deg, ref = dataset.batch(idx)
        out = enhance(model, deg.to(device=device, dtype=dtype)).cpu()
        for j, i in enumerate(idx):
            rec = manifest.records[i]
            pred = to_array(out[j])
            if out_dir is not None:
                save_image(pred, os.path.join(out_dir, rec.image_id + ".png"))
            report.add(rec.image_id, uw_metrics.compute_metrics(pred, to_array(ref[j]), report.metrics))
    return report


def evaluate_inputs(manifest: DatasetManifest, metrics=("psnr", "ssim", "mse")) -> uw_metrics.MetricReport:
    """Score the degraded inputs themselves (the "Input" baseline row)."""
    dataset = PairedImageDataset(manifest, cache=False, dtype=torch.float64)
    report = uw_metrics.MetricReport(list(metrics), metadata={"dataset": manifest.name, "model": "input"})
    for i, rec in enumerate(manifest.records):
        deg, ref = dataset[i]
        if deg.shape != ref.shape:
            raise ValueError("input baseline needs same-size pairs (scale 1)")
        report.add(rec.image_id, uw_metrics.compute_metrics(to_array(deg), to_array(ref), report.metrics))
    return report


def evaluate(checkpoint, manifest: DatasetManifest, metrics=("psnr", "ssim", "mse"), out_dir=None) -> uw_metrics.MetricReport:
    model, _ = load_checkpoint(checkpoint)
    report = evaluate_model(model, manifest, metrics, out_dir)
    report.metadata["checkpoint"] = os.fspath(checkpoint)
    if out_dir is not None:
        report.write(out_dir)
    return report


LOSS_COMBOS = {
    "l2": (0.0, 0.0),
    "l2+lp": (None, 0.0),
    "l2+lp+lssim": (None, None),
}


def run_ablation(
    base: TrainConfig,
    train_manifest: DatasetManifest,
    eval_manifest: DatasetManifest,
    variants=tuple(Variant),
    loss_combos=tuple(LOSS_COMBOS),
    metrics=("psnr", "ssim", "mse"),
    extractor: VGGFeatureExtractor | None = None,
    out_dir=None,
) -> uw_metrics.MetricReport:
    """Train and score every architecture variant (with ``base.loss``) and every
    loss combination (with ``base.model.variant``) under one seed and schedule.

    Loss combos use ``base.loss`` for whichever lambdas they switch on; a
    lambda of 0 in ``base.loss`` is replaced by the default weight.
    """
    defaults = LossWeights()
    runs = []
    for v in variants:
        runs.append((f"variant:{Variant(v).value}", replace(base, model=replace(base.model, variant=Variant(v)))))
    for combo in loss_combos:
        lp, ls = LOSS_COMBOS[combo]
        lam_p = lp if lp is not None else (base.loss.lambda_p or defaults.lambda_p)
        lam_s = ls if ls is not None else (base.loss.lambda_s or defaults.lambda_s)
        runs.append((f"loss:{combo}", replace(base, loss=replace(base.loss, lambda_p=lam_p, lambda_s=lam_s))))

    if extractor is None and any(cfg.loss.lambda_p > 0 for _, cfg in runs):
        extractor = VGGFeatureExtractor.from_file(base.perceptual_weights)
    train_data = PairedImageDataset(train_manifest)
    eval_data = PairedImageDataset(eval_manifest)
    n_train = len(train_data)

    report = uw_metrics.MetricReport(
        list(metrics), metadata={"train": train_manifest.name, "eval": eval_manifest.name, "runs": {}}
    )
    for name, cfg in runs:
        cfg = replace(cfg, checkpoint_dir=None, log_path=None, eval_every=0)
        result = train(cfg, train_manifest, extractor=extractor, dataset=train_data)
        scored = evaluate_model(result.model, eval_manifest, metrics, dataset=eval_data)
        agg = scored.aggregate()
        report.add(name, {m: agg[m]["mean"] for m in metrics})
        report.metadata["runs"][name] = {
            "variant": cfg.model.variant.value,
            "lambda_p": cfg.loss.lambda_p,
            "lambda_s": cfg.loss.lambda_s,
            "seed": cfg.seed,
            "model_seed": cfg.model.seed,
            "steps": total_steps(cfg, n_train),
            "final_total_loss": result.log[-1]["total"] if result.log else None,
        }
        log.info("ablation %s: %s", name, {m: agg[m]["mean"] for m in metrics})
    if out_dir is not None:
        report.write(out_dir, "ablation")
    return report
