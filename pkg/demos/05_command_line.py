"""
Driving everything from the command line
========================================

Writes a run config and calls the ``deepwavenet`` commands the way a shell
script would: train, evaluate, enhance a folder, and score it.
"""

import os
import subprocess
import sys
import tempfile

import yaml

from deepwavenet.losses import VGGFeatureExtractor
from deepwavenet.synthetic import write_paired_dataset

root = tempfile.mkdtemp()
deg, ref = write_paired_dataset(f"{root}/data", 12, 32, 32, seed=0)

# Perceptual weights come from a file; point the config at one.
weights = f"{root}/vgg_relu2_2.pth"
VGGFeatureExtractor.untrained(seed=0).save(weights)

config = {
    "model": {"branch_width": 8},
    "loss": {"lambda_p": 0.02, "lambda_s": 0.5},
    "perceptual": {"weights_path": weights},
    "train": {"lr": 1e-3, "batch_size": 4, "max_steps": 20, "max_epochs": None},
    "data": {
        "train": {"degraded_dir": deg, "reference_dir": ref, "policy": "native"},
        "test": {"degraded_dir": deg, "reference_dir": ref, "policy": "native"},
    },
    "metrics": ["psnr", "ssim", "uiqm"],
    "output": {"dir": f"{root}/run"},
}
cfg = f"{root}/run.yaml"
with open(cfg, "w") as f:
    yaml.safe_dump(config, f)


def run(*args):
    cmd = [sys.executable, "-m", "deepwavenet.cli", *args]
    print("$ deepwavenet", " ".join(args[:1] + tuple(os.path.basename(a) if a.startswith(root) else a for a in args[1:])))
    out = subprocess.run(cmd, capture_output=True, text=True)
    print(out.stdout.strip() or out.stderr.strip(), f"\n[exit {out.returncode}]\n")
    return out.returncode


ckpt = f"{root}/run/checkpoints/final.pt"
run("train", "--config", cfg, "--seed", "1")
run("train", "--config", cfg)  # refuses to overwrite: exit 1
run("evaluate", "--config", cfg, "--checkpoint", ckpt)
run("enhance", "--checkpoint", ckpt, "--input", deg, "--output", f"{root}/enhanced")
run("metrics", "--pred", f"{root}/enhanced", "--ref", ref, "--metrics", "psnr,uciqe", "--output", f"{root}/scores")
run("enhance", "--checkpoint", f"{root}/missing.pt", "--input", deg, "--output", f"{root}/x")  # exit 1
