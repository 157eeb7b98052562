"""
Pretrain, fine-tune and evaluate at toy scale
=============================================

Mirrors the usual recipe at a size a laptop CPU finishes in a few
minutes: pretrain on one kind of water, fine-tune on another, and compare
the restored images with the raw inputs on held-out pairs.
"""

import tempfile
from dataclasses import replace

import torch

from deepwavenet.datasets import PreparationPolicy, scan_paired_dirs
from deepwavenet.losses import LossWeights, VGGFeatureExtractor
from deepwavenet.model import ModelConfig
from deepwavenet.synthetic import write_paired_dataset
from deepwavenet.trainer import TrainConfig, evaluate_inputs, evaluate_model, finetune, train

torch.set_num_threads(1)
root = tempfile.mkdtemp()
policy = PreparationPolicy.preset("native")

# Two synthetic datasets on disk, laid out as parallel degraded/reference folders.
ocean = scan_paired_dirs(*write_paired_dataset(f"{root}/ocean", 48, 24, 24, seed=1), "ocean", policy)
coast = scan_paired_dirs(*write_paired_dataset(f"{root}/coast", 40, 24, 24, seed=2, water="coastal"), "coast", policy)
coast_train, coast_test = coast.subset(coast.records[:32]), coast.subset(coast.records[32:])

extractor = VGGFeatureExtractor.untrained(seed=0)
config = TrainConfig(
    model=ModelConfig(branch_width=16),
    loss=LossWeights(lambda_p=0.02, lambda_s=0.5),
    lr=1e-3,
    batch_size=4,
    max_steps=150,
    max_epochs=None,
    checkpoint_dir=f"{root}/pretrain",
    log_path=f"{root}/pretrain/log.jsonl",
)

pre = train(config, ocean, extractor=extractor)
print(f"pretrain loss {pre.log[0]['total']:.4f} -> {pre.log[-1]['total']:.4f}")

# Fine-tuning starts from the saved weights with a fresh optimizer.
tuned = finetune(pre.checkpoint, coast_train, replace(config, checkpoint_dir=None, log_path=None), extractor=extractor)

inputs = evaluate_inputs(coast_test, ("psnr", "ssim"))
before = evaluate_model(pre.model, coast_test, ("psnr", "ssim"))
after = evaluate_model(tuned.model, coast_test, ("psnr", "ssim"))
for name, rep in [("raw input", inputs), ("pretrained", before), ("fine-tuned", after)]:
    print(f"{name:>11}: PSNR {rep.mean('psnr'):.2f} dB  SSIM {rep.mean('ssim'):.3f}")

print(after.to_csv())
