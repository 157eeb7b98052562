"""Deep WaveNet: wavelength-aware underwater image enhancement and super-resolution."""
from .model import CBAM, DeepWaveNet, ModelConfig, Variant, load_checkpoint, pixel_shuffle, pixel_unshuffle, save_checkpoint
from .losses import CompositeLoss, LossWeights, VGGFeatureExtractor, mse_loss, perceptual_loss, ssim_index, ssim_loss, total_objective
from .metrics import MetricReport, evaluate_folder, psnr, ssim_metric, uciqe, uiqm

__version__ = "0.1.0"
