"""
Losses and quality metrics on a synthetic underwater pair
=========================================================

Degrades a clean synthetic scene with a simple water model and scores the
result with the training losses and the evaluation metrics.
"""

import numpy as np
import torch
from scipy import ndimage

from deepwavenet import metrics
from deepwavenet.datasets import to_tensor
from deepwavenet.losses import LossWeights, VGGFeatureExtractor, mse_loss, ssim_loss, total_objective
from deepwavenet.synthetic import make_pairs

degraded, clean = make_pairs(1, 64, 64, seed=3, water="open_ocean")
d, j = degraded[0], clean[0]

# Full-reference scores of the raw degraded image.
print(f"PSNR {metrics.psnr(d, j):.2f} dB   SSIM {metrics.ssim_metric(d, j):.3f}   MSE {metrics.mse(d, j):.4f}")

# No-reference underwater scores: the clean scene should look more colourful
# and contrasty than its degraded version.
for name, img in [("degraded", d), ("clean", j)]:
    print(f"{name:>9}: UIQM {metrics.uiqm(img):.3f}  UCIQE {metrics.uciqe(img):.3f}  "
          f"entropy {metrics.avg_entropy(img):.2f} bits  gradient {metrics.avg_gradient(img):.2f}")

# SSIM falls as blur grows.
for sigma in (0.5, 1.0, 2.0, 4.0):
    blurred = ndimage.gaussian_filter(j, sigma=(sigma, sigma, 0))
    print(f"blur sigma {sigma}: SSIM {metrics.ssim_metric(blurred, j):.3f}")

# The training objective. Pretrained VGG weights are normally loaded from a
# file; an untrained extractor is enough to show the mechanics here.
extractor = VGGFeatureExtractor.untrained(seed=0)
pred, target = to_tensor(d)[None].float(), to_tensor(j)[None].float()
print("L2", mse_loss(pred, target).item(), " L_SSIM", ssim_loss(pred, target).item())
print("total", total_objective(pred, target, LossWeights(lambda_p=0.02, lambda_s=0.5), extractor).item())
print("total without extra terms equals L2:",
      total_objective(pred, target, LossWeights(0.0, 0.0)).item() == mse_loss(pred, target).item())
