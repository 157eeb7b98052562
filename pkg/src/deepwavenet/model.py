"""Deep WaveNet restoration network.

Each color plane of the degraded image gets its own receptive field
(red 3x3, green 5x5, blue 7x7). Stage 2 refines the color-localized skip
connections with CBAM, stage 3 adds the degraded planes back to form a
3-channel color-correction residual, and stage 4 reconstructs the output
with stride-1 transposed convolutions. For super-resolution the last layer
emits ``3 * s**2`` channels which are rearranged by :func:`pixel_shuffle`.
"""
from __future__ import annotations

import enum
import io
import os
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "deepwavenet-checkpoint/1"

# default width lands the FULL model near the reported 3.23 MB (see README)
DEFAULT_BRANCH_WIDTH = 56


class Variant(str, enum.Enum):
    """Architecture ablation selector."""

    FULL = "FULL"
    WAVENET_1 = "WAVENET_1"  # 3x3 everywhere, no CBAM
    WAVENET_2 = "WAVENET_2"  # 3/5/7 kernels, no CBAM
    WAVENET_3 = "WAVENET_3"  # 3x3 everywhere, with CBAM
    WAVENET_M = "WAVENET_M"  # stage 1 branches see the whole RGB image

    @property
    def kernel_sizes(self) -> tuple[int, int, int]:
        if self in (Variant.WAVENET_1, Variant.WAVENET_3):
            return (3, 3, 3)
        return (3, 5, 7)

    @property
    def uses_cbam(self) -> bool:
        return self not in (Variant.WAVENET_1, Variant.WAVENET_2)

    @property
    def whole_image_stage1(self) -> bool:
        return self is Variant.WAVENET_M


@dataclass(frozen=True)
class ModelConfig:
    branch_width: int = DEFAULT_BRANCH_WIDTH
    cbam_reduction: int = 4
    scale_factor: int = 1
    variant: Variant = Variant.FULL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.scale_factor not in (1, 2, 3, 4):
            raise ValueError(f"scale_factor must be one of 1, 2, 3, 4, got {self.scale_factor}")
        if self.branch_width < 1:
            raise ValueError(f"branch_width must be >= 1, got {self.branch_width}")
        if self.cbam_reduction < 1:
            raise ValueError(f"cbam_reduction must be >= 1, got {self.cbam_reduction}")
        # narrowest CBAM input is the stage-4 block: branch_width + 3 channels
        if self.variant.uses_cbam and (self.branch_width + 3) // self.cbam_reduction < 1:
            raise ValueError("cbam_reduction too large for branch_width")

    @property
    def output_channels(self) -> int:
        return 3 * self.scale_factor**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise ValueError(f"{where}: input contains non-finite values")


class CBAM(nn.Module):
    """Channel attention followed by spatial attention.

    The channel MLP has one hidden layer of ``channels // reduction`` units
    and is shared between the average- and max-pooled descriptors. The
    spatial map comes from a 7x7 convolution over the channel-wise mean and
    max planes.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = channels // reduction
        if hidden < 1:
            raise ValueError(
                f"CBAM needs channels // reduction >= 1 (channels={channels}, reduction={reduction})"
            )
        self.channels = channels
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(),
            nn.Linear(hidden, channels),
        )
        self.spatial = nn.Conv2d(2, 1, kernel_size=7, padding=3, bias=False)

    def channel_attention(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx)[:, :, None, None]

    def spatial_attention(self, h: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([h.mean(dim=1, keepdim=True), h.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"CBAM expected (n, {self.channels}, h, w), got {tuple(x.shape)}")
        _check_finite(x, "CBAM")
        h = self.channel_attention(x) * x
        return self.spatial_attention(h) * h


class ConvUnit(nn.Module):
    """conv -> batch norm -> PReLU with same padding.

    The convolution has no bias: the batch-norm shift already provides one.
    """

    def __init__(self, cin: int, cout: int, kernel_size: int, transpose: bool = False):
        super().__init__()
        pad = kernel_size // 2
        if transpose:
            self.conv = nn.ConvTranspose2d(cin, cout, kernel_size, stride=1, padding=pad, bias=False)
        else:
            self.conv = nn.Conv2d(cin, cout, kernel_size, padding=pad, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.PReLU(cout, init=0.25)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


def pixel_shuffle(x: torch.Tensor, scale: int, out_channels: int = 3) -> torch.Tensor:
    """Rearrange ``(n, k*s*s, h, w)`` into ``(n, k, s*h, s*w)``.

    Output pixel ``(k, u, v)`` reads input channel
    ``k*s*s + (u % s)*s + (v % s)`` at ``(u // s, v // s)``.
    """
    n, c, h, w = x.shape
    if c != out_channels * scale * scale:
        raise ValueError(
            f"pixel_shuffle expects {out_channels * scale * scale} channels for scale {scale}, got {c}"
        )
    if scale == 1:
        return x
    x = x.reshape(n, out_channels, scale, scale, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(n, out_channels, h * scale, w * scale)


def pixel_unshuffle(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    n, k, H, W = x.shape
    if H % scale or W % scale:
        raise ValueError(f"spatial dims {H}x{W} not divisible by {scale}")
    if scale == 1:
        return x
    h, w = H // scale, W // scale
    x = x.reshape(n, k, h, scale, w, scale)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(n, k * scale * scale, h, w)


class DeepWaveNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        C = config.branch_width
        ks = config.variant.kernel_sizes
        r = config.cbam_reduction
        cbam = config.variant.uses_cbam
        stage1_in = 3 if config.variant.whole_image_stage1 else 1

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.stage1 = nn.ModuleList([ConvUnit(stage1_in, C, k) for k in ks])
            self.stage2 = nn.ModuleList([ConvUnit(3 * C, C, k) for k in ks])
            self.stage2_cbam = nn.ModuleList([CBAM(2 * C, r) for _ in ks]) if cbam else None
            self.stage3 = nn.ModuleList([ConvUnit(6 * C, 1, k) for k in ks])
            self.stage4_in = ConvUnit(3, C, 3, transpose=True)
            self.stage4_cbam = CBAM(C + 3, r) if cbam else None
            self.stage4_out = ConvUnit(C + 3, config.output_channels, 3, transpose=True)

    def stage1_features(self, d: torch.Tensor) -> list[torch.Tensor]:
        if self.config.variant.whole_image_stage1:
            return [unit(d) for unit in self.stage1]
        return [unit(d[:, i : i + 1]) for i, unit in enumerate(self.stage1)]

    def stage2_features(self, m1: torch.Tensor, f1: list[torch.Tensor]) -> list[torch.Tensor]:
        out = []
        for i, unit in enumerate(self.stage2):
            f = unit(m1)
            if f.shape != f1[i].shape:
                raise RuntimeError(f"stage 2 branch {i}: shape {tuple(f.shape)} vs skip {tuple(f1[i].shape)}")
            f = torch.cat([f, f1[i]], dim=1)
            if self.stage2_cbam is not None:
                f = self.stage2_cbam[i](f)
            out.append(f)
        return out

    def stage3_residual(self, m2: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        if m2.shape[-2:] != d.shape[-2:]:
            raise ValueError(f"stage 3: feature size {tuple(m2.shape[-2:])} != input size {tuple(d.shape[-2:])}")
        return torch.cat([unit(m2) + d[:, i : i + 1] for i, unit in enumerate(self.stage3)], dim=1)

    def stage4_reconstruct(self, m3: torch.Tensor) -> torch.Tensor:
        f4 = torch.cat([self.stage4_in(m3), m3], dim=1)
        if self.stage4_cbam is not None:
            f4 = self.stage4_cbam(f4)
        return self.stage4_out(f4)

    def forward(self, d: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        """Restore a batch ``(n, 3, h, w)`` in [0, 1].

        Outputs are clamped to [0, 1] in eval mode unless ``clamp`` says
        otherwise; in training mode they are left raw for the losses.
        """
        if d.ndim != 4 or d.shape[1] != 3:
            raise ValueError(f"expected an RGB batch (n, 3, h, w), got {tuple(d.shape)}")
        _check_finite(d, "DeepWaveNet")
        f1 = self.stage1_features(d)
        m1 = torch.cat(f1, dim=1)
        m2 = torch.cat(self.stage2_features(m1, f1), dim=1)
        m3 = self.stage3_residual(m2, d)
        e = self.stage4_reconstruct(m3)
        e = pixel_shuffle(e, self.config.scale_factor)
        if clamp is None:
            clamp = not self.training
        return e.clamp(0.0, 1.0) if clamp else e


class CheckpointError(RuntimeError):
    pass


def checkpoint_payload(model: DeepWaveNet, **extra) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    return payload


def save_checkpoint(model: DeepWaveNet, path, **extra):
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    torch.save(checkpoint_payload(model, **extra), tmp)
    os.replace(tmp, path)


def read_checkpoint(path) -> dict:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return payload


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[DeepWaveNet, dict]:
    """Rebuild the model stored at ``path``.

    If ``expected`` is given, every architecture field except ``seed`` must
    match the stored config.
    """
    payload = read_checkpoint(path)
    config = ModelConfig.from_dict(payload["config"])
    if expected is not None:
        check_compatible(config, expected, path)
    model = DeepWaveNet(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload


def check_compatible(stored: ModelConfig, expected: ModelConfig, source="checkpoint"):
    diffs = [
        f"{name}: {getattr(stored, name)!r} != {getattr(expected, name)!r}"
        for name in ("branch_width", "cbam_reduction", "scale_factor", "variant")
        if getattr(stored, name) != getattr(expected, name)
    ]
    if diffs:
        raise CheckpointError(f"{source}: config mismatch ({'; '.join(diffs)})")


def serialized_size(model: DeepWaveNet) -> int:
    """Bytes taken by a weights-only checkpoint of ``model``."""
    buf = io.BytesIO()
    torch.save(checkpoint_payload(model), buf)
    return buf.getbuffer().nbytes


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def set_deterministic(threads: int = 1):
    """Single-threaded, deterministic kernels for reproducibility runs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    torch.backends.cudnn.benchmark = False
