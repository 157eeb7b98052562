"""Run configuration shared by every CLI command.

A run config is one YAML or JSON file::

    model:      {branch_width, cbam_reduction, scale_factor, variant, seed}
    loss:       {lambda_p, lambda_s, reduction}
    perceptual: {weights_path}
    train:      {lr, betas, eps, batch_size, max_steps, max_epochs, schedule,
                 eval_every, checkpoint_every, checkpoint_dir, log_path, seed,
                 device, deterministic}
    data:       {train: DataSpec, val: DataSpec, test: DataSpec}
    metrics:    [psnr, ssim, ...]
    output:     {dir, overwrite, image_format}
    ablation:   {variants: [...], losses: [...]}

A DataSpec is either ``{manifest: path}`` or ``{degraded_dir, reference_dir,
policy, resize, lr_scale, degraded_suffix, reference_suffix, name}``.
Unknown keys anywhere are rejected before any work starts.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace

import yaml

from .datasets import DatasetManifest, PreparationPolicy, scan_paired_dirs
from .losses import WEIGHTS_ENV, LossWeights
from .metrics import METRICS
from .model import ModelConfig, Variant
from .trainer import LOSS_COMBOS, TrainConfig


class ConfigError(ValueError):
    pass


def _check_keys(section: str, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


@dataclass
class DataSpec:
    name: str = "dataset"
    manifest: str | None = None
    degraded_dir: str | None = None
    reference_dir: str | None = None
    policy: str = "euvp"
    resize: list[int] | None = None
    lr_scale: int | None = None
    degraded_suffix: str = ""
    reference_suffix: str = ""

    def __post_init__(self):
        if self.manifest is None and (self.degraded_dir is None or self.reference_dir is None):
            raise ConfigError(f"data spec {self.name!r}: give either manifest or degraded_dir + reference_dir")

    def build(self, seed: int = 0, scale: int = 1) -> DatasetManifest:
        if self.manifest is not None:
            return DatasetManifest.load(self.manifest)
        overrides = {}
        if self.resize is not None:
            overrides["resize"] = tuple(self.resize)
        if self.lr_scale is not None:
            overrides["lr_scale"] = self.lr_scale
        elif self.policy == "ufo120":
            overrides["lr_scale"] = scale
        policy = PreparationPolicy.preset(self.policy, **overrides)
        return scan_paired_dirs(
            self.degraded_dir, self.reference_dir, self.name, policy, seed,
            self.degraded_suffix, self.reference_suffix,
        )


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model", "loss", "perceptual_weights", "finetune_from"}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict[str, DataSpec] = field(default_factory=dict)
    metrics: list[str] = field(default_factory=lambda: ["psnr", "ssim", "mse"])
    output_dir: str = "outputs"
    overwrite: bool = False
    image_format: str = "png"
    ablation_variants: list[str] = field(default_factory=lambda: [v.value for v in Variant])
    ablation_losses: list[str] = field(default_factory=lambda: list(LOSS_COMBOS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        _check_keys("config", d, {"model", "loss", "perceptual", "train", "data", "metrics", "output", "ablation"})
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
            _check_keys("loss", d.get("loss", {}), {f.name for f in fields(LossWeights)})
            loss = LossWeights(**d.get("loss", {}))
            perceptual = d.get("perceptual", {})
            _check_keys("perceptual", perceptual, {"weights_path"})
            train = d.get("train", {})
            _check_keys("train", train, _TRAIN_KEYS)
            tc = TrainConfig(
                model=model, loss=loss,
                perceptual_weights=perceptual.get("weights_path") or os.environ.get(WEIGHTS_ENV),
                **train,
            )
            data = {}
            _check_keys("data", d.get("data", {}), {"train", "val", "test"})
            for split, spec in d.get("data", {}).items():
                _check_keys(f"data.{split}", spec, {f.name for f in fields(DataSpec)})
                data[split] = DataSpec(**{"name": split, **spec})
            metrics = list(d.get("metrics", ["psnr", "ssim", "mse"]))
            bad = [m for m in metrics if m not in METRICS]
            if bad:
                raise ConfigError(f"metrics: unknown {bad}; available {sorted(METRICS)}")
            out = d.get("output", {})
            _check_keys("output", out, {"dir", "overwrite", "image_format"})
            abl = d.get("ablation", {})
            _check_keys("ablation", abl, {"variants", "losses"})
            variants = [Variant(v).value for v in abl.get("variants", [v.value for v in Variant])]
            losses = list(abl.get("losses", list(LOSS_COMBOS)))
            bad = [x for x in losses if x not in LOSS_COMBOS]
            if bad:
                raise ConfigError(f"ablation.losses: unknown {bad}; available {list(LOSS_COMBOS)}")
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        fmt = out.get("image_format", "png")
        if fmt not in ("png", "jpg"):
            raise ConfigError(f"output.image_format must be png or jpg, got {fmt!r}")
        return cls(tc, data, metrics, out.get("dir", "outputs"), bool(out.get("overwrite", False)), fmt, variants, losses)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            text = f.read()
        d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_dict(d)

    def with_overrides(self, seed=None, scale=None, device=None, deterministic=None, overwrite=None,
                       metrics=None, checkpoint_dir=None) -> "RunConfig":
        tc = self.train
        if seed is not None:
            tc = replace(tc, seed=seed, model=replace(tc.model, seed=seed))
        if scale is not None:
            tc = replace(tc, model=replace(tc.model, scale_factor=scale))
        if device is not None:
            tc = replace(tc, device=device)
        if deterministic is not None:
            tc = replace(tc, deterministic=deterministic)
        if checkpoint_dir is not None:
            tc = replace(tc, checkpoint_dir=checkpoint_dir)
        out = replace(self, train=tc)
        if overwrite is not None:
            out.overwrite = overwrite
        if metrics is not None:
            bad = [m for m in metrics if m not in METRICS]
            if bad:
                raise ConfigError(f"--metrics: unknown {bad}")
            out.metrics = list(metrics)
        return out

    def manifest(self, split: str) -> DatasetManifest:
        if split not in self.data:
            raise ConfigError(f"config has no data.{split} section")
        return self.data[split].build(self.train.seed, self.train.model.scale_factor)
