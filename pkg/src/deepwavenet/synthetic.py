"""Synthetic underwater image pairs for smoke runs, demos and tests.

Clean scenes are smooth random color fields with a few hard-edged blobs.
Degradation follows the usual image formation model
``I_c = J_c * t_c + B_c * (1 - t_c)`` with ``t_c = exp(-beta_c * depth)``,
where red attenuates fastest and blue slowest.
"""
from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from .datasets import save_image

# per-channel attenuation (R, G, B) and veiling light for two water types
WATER_TYPES = {
    "open_ocean": {"beta": (1.6, 0.55, 0.35), "veil": (0.05, 0.35, 0.50)},
    "coastal": {"beta": (1.2, 0.45, 0.70), "veil": (0.10, 0.45, 0.35)},
}


def clean_scene(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Random ``(h, w, 3)`` scene in [0, 1]."""
    base = rng.random((height, width, 3))
    img = ndimage.gaussian_filter(base, sigma=(max(height, width) / 8, max(height, width) / 8, 0))
    img = (img - img.min()) / max(img.max() - img.min(), 1e-8)
    yy, xx = np.mgrid[:height, :width]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.random(2) * (height, width)
        r = rng.uniform(0.1, 0.3) * min(height, width)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        img[mask] = rng.random(3)
    return np.clip(0.1 + 0.85 * img, 0.0, 1.0)


def degrade(clean: np.ndarray, rng: np.random.Generator, water: str = "open_ocean") -> np.ndarray:
    h, w, _ = clean.shape
    params = WATER_TYPES[water]
    beta = np.asarray(params["beta"]) * rng.uniform(0.8, 1.2)
    veil = np.clip(np.asarray(params["veil"]) + rng.normal(0, 0.03, 3), 0, 1)
    ramp = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    depth = rng.uniform(0.8, 1.6) + rng.uniform(0.5, 1.5) * ramp
    t = np.exp(-beta[None, None, :] * depth[:, :, None])
    out = clean * t + veil[None, None, :] * (1 - t)
    out = ndimage.gaussian_filter(out, sigma=(0.6, 0.6, 0))
    return np.clip(out, 0.0, 1.0)


def make_pairs(n: int, height: int = 32, width: int = 32, seed: int = 0, water: str = "open_ocean"):
    """Return ``(degraded, clean)`` float arrays of shape ``(n, h, w, 3)``."""
    rng = np.random.default_rng(seed)
    clean = np.stack([clean_scene(rng, height, width) for _ in range(n)])
    degraded = np.stack([degrade(c, rng, water) for c in clean])
    return degraded, clean


def write_paired_dataset(root, n: int, height: int = 32, width: int = 32, seed: int = 0,
                         water: str = "open_ocean", prefix: str = "img"):
    """Write ``root/degraded`` and ``root/reference`` PNG folders; returns both paths."""
    degraded, clean = make_pairs(n, height, width, seed, water)
    ddir = os.path.join(root, "degraded")
    rdir = os.path.join(root, "reference")
    os.makedirs(ddir, exist_ok=True)
    os.makedirs(rdir, exist_ok=True)
    for i in range(n):
        name = f"{prefix}_{i:04d}.png"
        save_image(degraded[i], os.path.join(ddir, name))
        save_image(clean[i], os.path.join(rdir, name))
    return ddir, rdir
