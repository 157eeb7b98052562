"""
The variant and loss ablation grid
==================================

Trains every architecture variant and every loss combination for the same
number of steps from the same seed and prints one comparison table.
"""

import tempfile

import torch

from deepwavenet.datasets import PreparationPolicy, scan_paired_dirs
from deepwavenet.losses import VGGFeatureExtractor
from deepwavenet.model import ModelConfig
from deepwavenet.synthetic import write_paired_dataset
from deepwavenet.trainer import TrainConfig, run_ablation

torch.set_num_threads(1)
root = tempfile.mkdtemp()
policy = PreparationPolicy.preset("native")
train_set = scan_paired_dirs(*write_paired_dataset(f"{root}/train", 16, 16, 16, seed=1), "train", policy)
eval_set = scan_paired_dirs(*write_paired_dataset(f"{root}/eval", 8, 16, 16, seed=2), "eval", policy)

base = TrainConfig(model=ModelConfig(branch_width=16), lr=1e-3, batch_size=4, max_steps=60, max_epochs=None)
report = run_ablation(base, train_set, eval_set, metrics=("psnr", "ssim"),
                      extractor=VGGFeatureExtractor.untrained(seed=0), out_dir=f"{root}/ablation")
print(report.to_csv())
for name, run in report.metadata["runs"].items():
    print(f"{name:>22}: seed {run['seed']}, {run['steps']} steps, final loss {run['final_total_loss']:.4f}")
