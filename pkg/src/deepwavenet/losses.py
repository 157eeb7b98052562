"""Training objective: pixel MSE + VGG16 relu2_2 perceptual loss + SSIM loss."""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

WEIGHTS_ENV = "DEEPWAVENET_VGG_WEIGHTS"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# conv1_1 .. relu2_2 of torchvision's vgg16().features
RELU2_2_INDEX = 8


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 0.02
    lambda_s: float = 0.5
    # "mean": average over every element; "per_image": per-image squared norm, averaged over the batch
    reduction: str = "mean"

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s"):
            v = getattr(self, name)
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.reduction not in ("mean", "per_image"):
            raise ValueError(f"reduction must be 'mean' or 'per_image', got {self.reduction!r}")


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def _squared_error(a, b, reduction):
    if reduction == "mean":
        return F.mse_loss(a, b, reduction="mean")
    if reduction == "per_image":
        return (a - b).pow(2).flatten(1).sum(1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def mse_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check_pair(pred, target)
    return _squared_error(pred, target, reduction)


class PerceptualWeightsError(FileNotFoundError):
    pass


class VGGFeatureExtractor(nn.Module):
    """Frozen VGG16 truncated after relu2_2.

    Inputs are RGB batches in [0, 1]; ImageNet mean/std standardization is
    applied internally. Weights are only ever read from a local file.
    """

    def __init__(self):
        super().__init__()
        from torchvision.models import vgg16

        self.features = vgg16(weights=None).features[: RELU2_2_INDEX + 1]
        for m in self.features:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.source = "uninitialized"
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always evaluated as a fixed function
        return super().train(False)

    @classmethod
    def from_file(cls, path=None) -> "VGGFeatureExtractor":
        """Load weights from ``path`` (or ``$DEEPWAVENET_VGG_WEIGHTS``).

        Accepts a full torchvision ``vgg16`` state dict or one holding only
        the ``features.0`` .. ``features.7`` entries.
        """
        path = path or os.environ.get(WEIGHTS_ENV)
        if not path:
            raise PerceptualWeightsError(
                "perceptual loss needs VGG16 weights: set perceptual.weights_path in the run config "
                f"or the {WEIGHTS_ENV} environment variable (or use lambda_p = 0)"
            )
        if not os.path.isfile(path):
            raise PerceptualWeightsError(
                f"VGG16 weights file not found: {path} (download torchvision's vgg16-397923af.pth "
                "and point perceptual.weights_path at it)"
            )
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state and isinstance(state["state_dict"], dict):
            state = state["state_dict"]
        prefix = "features."
        wanted = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        ext = cls()
        own = ext.features.state_dict()
        missing = [k for k in own if k not in wanted]
        if missing:
            raise PerceptualWeightsError(f"{path}: missing VGG16 entries {missing}")
        ext.features.load_state_dict({k: wanted[k] for k in own})
        ext.source = os.path.abspath(path)
        return ext.freeze()

    @classmethod
    def untrained(cls, seed: int = 0) -> "VGGFeatureExtractor":
        """Randomly initialized extractor for offline smoke runs and tests."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            ext = cls()
        ext.source = f"untrained(seed={seed})"
        return ext.freeze()

    def save(self, path):
        torch.save({f"features.{k}": v for k, v in self.features.state_dict().items()}, path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.mean) / self.std)


def perceptual_loss(pred, target, extractor: VGGFeatureExtractor, reduction: str = "mean") -> torch.Tensor:
    _check_pair(pred, target)
    with torch.no_grad():
        target_features = extractor(target)
    return _squared_error(extractor(pred), target_features, reduction)


@lru_cache(maxsize=16)
def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype=dtype, device=device)


def ssim_index(
    m: torch.Tensor,
    n: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Mean local SSIM per image, shape ``(b,)``.

    Local statistics use a Gaussian window evaluated only where it fits
    inside the image; channels are scored separately and averaged.
    """
    _check_pair(m, n)
    if m.ndim != 4:
        raise ValueError(f"expected (b, c, h, w), got {tuple(m.shape)}")
    b, c, h, w = m.shape
    if window_size > h or window_size > w:
        raise ValueError(f"SSIM window {window_size} larger than image {h}x{w}")
    z1 = (0.01 * data_range) ** 2
    z2 = (0.03 * data_range) ** 2
    win = _gaussian_window(window_size, float(sigma), m.dtype, m.device)
    win = win.expand(c, 1, window_size, window_size)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_m, mu_n = filt(m), filt(n)
    var_m = filt(m * m) - mu_m**2
    var_n = filt(n * n) - mu_n**2
    cov = filt(m * n) - mu_m * mu_n
    lum = (2 * mu_m * mu_n + z1) / (mu_m**2 + mu_n**2 + z1)
    cs = (2 * cov + z2) / (var_m + var_n + z2)
    return (lum * cs).flatten(1).mean(1)


def ssim_loss(pred, target, **kwargs) -> torch.Tensor:
    """``1/(2b) * sum_j (1 - SSIM_j)``."""
    s = ssim_index(pred, target, **kwargs)
    return (1 - s).sum() / (2 * s.shape[0])


class CompositeLoss(nn.Module):
    """``L2 + lambda_p * L_P + lambda_s * L_SSIM``; zero-weight terms are not computed."""

    def __init__(self, weights: LossWeights | None = None, extractor: VGGFeatureExtractor | None = None):
        super().__init__()
        self.weights = weights or LossWeights()
        if self.weights.lambda_p > 0 and extractor is None:
            raise PerceptualWeightsError("lambda_p > 0 requires a VGG feature extractor")
        self.extractor = extractor

    def terms(self, pred, target) -> dict[str, torch.Tensor]:
        w = self.weights
        out = {"l2": mse_loss(pred, target, w.reduction)}
        total = out["l2"]
        if w.lambda_p > 0:
            out["lp"] = perceptual_loss(pred, target, self.extractor, w.reduction)
            total = total + w.lambda_p * out["lp"]
        if w.lambda_s > 0:
            out["lssim"] = ssim_loss(pred, target)
            total = total + w.lambda_s * out["lssim"]
        out["total"] = total
        return out

    def forward(self, pred, target):
        return self.terms(pred, target)["total"]


def total_objective(pred, target, weights: LossWeights | None = None, extractor=None) -> torch.Tensor:
    return CompositeLoss(weights, extractor)(pred, target)
