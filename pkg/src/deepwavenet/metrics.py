"""Full-reference and no-reference image quality metrics.

All functions take ``(h, w, 3)`` RGB arrays in [0, 1]. The no-reference
underwater measures follow the usual conventions of their original
publications and the widely used public evaluation scripts:

* UIQM = 0.0282 UICM + 0.2953 UISM + 3.5753 UIConM, computed on the
  0..255 scale; UICM uses asymmetric alpha-trimmed (0.1/0.1) statistics of
  the RG and YB opponent planes, UISM the block EME (8x8) of Sobel-weighted
  channels, UIConM the block log-AMEE (8x8) of the RGB block extrema.
* UCIQE = 0.4680 sigma_c + 0.2745 con_l + 0.2576 mu_s in CIELab with L
  and chroma scaled by 1/100; con_l is the spread between the top and
  bottom 1% of luminance, mu_s the mean chroma/luminance ratio.
* Average entropy: per-channel Shannon entropy (bits) of the 256-bin
  histogram of the 8-bit requantized image, averaged over channels.
* Average gradient: mean of sqrt((dx^2 + dy^2) / 2) over forward
  differences on the 0..255 scale, averaged over channels.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .datasets import IMAGE_EXTENSIONS, load_image
from .losses import ssim_index

UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
INF_SENTINEL = "inf"

FULL_REFERENCE = ("mse", "psnr", "ssim")
NO_REFERENCE = ("uiqm", "uicm", "uism", "uiconm", "uciqe", "entropy", "gradient")


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def _rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) RGB image, got shape {img.shape}")
    return img


def mse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def psnr(pred, target, peak: float = 1.0) -> float:
    err = mse(pred, target)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def ssim_metric(pred, target, window_size: int = 11, sigma: float = 1.5) -> float:
    """SSIM of two RGB images; same kernel as the training loss."""
    pred, target = _pair(pred, target)
    a = torch.from_numpy(np.ascontiguousarray(pred.transpose(2, 0, 1)))[None]
    b = torch.from_numpy(np.ascontiguousarray(target.transpose(2, 0, 1)))[None]
    return float(ssim_index(a, b, window_size=window_size, sigma=sigma)[0])


def trimmed_mean(x: np.ndarray, alpha_low: float = 0.1, alpha_high: float = 0.1) -> float:
    """Asymmetric alpha-trimmed mean: drop ceil(aL*K) lowest and floor(aR*K) highest samples."""
    x = np.sort(np.ravel(x))
    k = x.size
    lo = math.ceil(alpha_low * k)
    hi = math.floor(alpha_high * k)
    return float(x[lo : k - hi].mean())


def uicm(image, alpha_low: float = 0.1, alpha_high: float = 0.1) -> float:
    img = _rgb(image) * 255.0
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    rg = r - g
    yb = (r + g) / 2.0 - b
    mu_rg = trimmed_mean(rg, alpha_low, alpha_high)
    mu_yb = trimmed_mean(yb, alpha_low, alpha_high)
    var_rg = np.mean((rg - mu_rg) ** 2)
    var_yb = np.mean((yb - mu_yb) ** 2)
    return float(-0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb))


def _blocks(x: np.ndarray, size: int) -> np.ndarray:
    """Non-overlapping ``size x size`` blocks; ragged borders are cropped."""
    k1, k2 = x.shape[0] // size, x.shape[1] // size
    if k1 == 0 or k2 == 0:
        raise ValueError(f"image {x.shape[:2]} smaller than block size {size}")
    x = x[: k1 * size, : k2 * size]
    x = x.reshape(k1, size, k2, size, *x.shape[2:])
    return np.moveaxis(x, 2, 1).reshape(k1 * k2, -1)


def eme(x: np.ndarray, block: int = 8) -> float:
    b = _blocks(x, block)
    lo, hi = b.min(axis=1), b.max(axis=1)
    ok = lo > 0
    return float(2.0 / b.shape[0] * np.sum(np.log(hi[ok] / lo[ok])))


def _sobel_weighted(channel: np.ndarray) -> np.ndarray:
    mag = np.hypot(ndimage.sobel(channel, 0), ndimage.sobel(channel, 1))
    peak = mag.max()
    if peak > 0:
        mag = mag * (255.0 / peak)
    return mag * channel


def uism(image, block: int = 8) -> float:
    img = _rgb(image) * 255.0
    weights = (0.299, 0.587, 0.114)
    return float(sum(w * eme(_sobel_weighted(img[..., c]), block) for c, w in enumerate(weights)))


def uiconm(image, block: int = 8) -> float:
    img = _rgb(image) * 255.0
    b = _blocks(img, block)
    lo, hi = b.min(axis=1), b.max(axis=1)
    top, bot = hi - lo, hi + lo
    ok = (top > 0) & (bot > 0)
    ratio = top[ok] / bot[ok]
    return float(-1.0 / b.shape[0] * np.sum(ratio * np.log(ratio)))


def uiqm(image, coeffs=UIQM_COEFFS, block: int = 8) -> float:
    c1, c2, c3 = coeffs
    total = c1 * uicm(image)
    if c2:
        total += c2 * uism(image, block)
    if c3:
        total += c3 * uiconm(image, block)
    return float(total)


_SRGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
# white point taken as the image of RGB white, so neutral pixels land exactly on a = b = 0
_WHITE = _SRGB_TO_XYZ.sum(axis=1)


def rgb_to_lab(image) -> np.ndarray:
    """sRGB in [0, 1] to CIELab (L in 0..100)."""
    img = _rgb(image)
    lin = np.where(img > 0.04045, ((img + 0.055) / 1.055) ** 2.4, img / 12.92)
    xyz = lin @ _SRGB_TO_XYZ.T / _WHITE
    f = np.where(xyz > 0.008856, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def uciqe_terms(image) -> tuple[float, float, float]:
    """(chroma std, luminance contrast, mean saturation)."""
    lab = rgb_to_lab(image)
    lum = lab[..., 0] / 100.0
    chroma = np.hypot(lab[..., 1], lab[..., 2]) / 100.0
    sigma_c = float(np.std(chroma))
    flat = np.sort(lum, axis=None)
    n = max(1, int(round(0.01 * flat.size)))
    con_l = float(flat[-n:].mean() - flat[:n].mean())
    sat = np.divide(chroma, lum, out=np.zeros_like(chroma), where=lum > 0)
    return sigma_c, con_l, float(sat.mean())


def uciqe(image, coeffs=UCIQE_COEFFS) -> float:
    return float(sum(c * t for c, t in zip(coeffs, uciqe_terms(image))))


def quantize8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def avg_entropy(image) -> float:
    q = quantize8(_rgb(image))
    out = []
    for c in range(3):
        p = np.bincount(q[..., c].ravel(), minlength=256) / q[..., c].size
        p = p[p > 0]
        out.append(-np.sum(p * np.log2(p)))
    return float(np.mean(out)) + 0.0


def avg_gradient(image, scale: float = 255.0) -> float:
    img = _rgb(image) * scale
    dx = img[:-1, 1:, :] - img[:-1, :-1, :]
    dy = img[1:, :-1, :] - img[:-1, :-1, :]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2.0)))


METRICS = {
    "mse": mse,
    "psnr": psnr,
    "ssim": ssim_metric,
    "uiqm": uiqm,
    "uicm": uicm,
    "uism": uism,
    "uiconm": uiconm,
    "uciqe": uciqe,
    "entropy": avg_entropy,
    "gradient": avg_gradient,
}


def compute_metrics(pred, target=None, metrics=("psnr", "ssim", "mse")) -> dict[str, float]:
    out = {}
    for name in metrics:
        if name not in METRICS:
            raise ValueError(f"unknown metric {name!r}; available: {sorted(METRICS)}")
        if name in FULL_REFERENCE:
            if target is None:
                raise ValueError(f"{name} needs a reference image")
            out[name] = METRICS[name](pred, target)
        else:
            out[name] = METRICS[name](pred)
    return out


@dataclass
class MetricReport:
    metrics: list[str]
    records: list[dict] = field(default_factory=list)  # {"image_id": ..., metric: value}
    metadata: dict = field(default_factory=dict)
    unmatched: list[str] = field(default_factory=list)

    def add(self, image_id: str, values: dict):
        self.records.append({"image_id": image_id, **values})

    def aggregate(self) -> dict[str, dict]:
        """Mean and population std per metric; infinite values are counted, not averaged."""
        out = {}
        for m in self.metrics:
            vals = np.array([r[m] for r in self.records if m in r], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            out[m] = {
                "mean": float(finite.mean()) if finite.size else math.nan,
                "std": float(finite.std()) if finite.size else math.nan,
                "n": int(vals.size),
                "n_inf": int(np.isinf(vals).sum()),
            }
        return out

    def mean(self, metric: str) -> float:
        return self.aggregate()[metric]["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", *self.metrics])
        for r in self.records:
            w.writerow([r["image_id"], *(_fmt(r.get(m)) for m in self.metrics)])
        agg = self.aggregate()
        w.writerow(["__mean__", *(_fmt(agg[m]["mean"]) for m in self.metrics)])
        w.writerow(["__std__", *(_fmt(agg[m]["std"]) for m in self.metrics)])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {
            "metrics": self.metrics,
            "metadata": self.metadata,
            "records": [{k: _json_value(v) for k, v in r.items()} for r in self.records],
            "aggregate": {m: {k: _json_value(v) for k, v in a.items()} for m, a in self.aggregate().items()},
            "unmatched": self.unmatched,
        }
        return json.dumps(d, indent=2) + "\n"

    def write(self, directory, stem: str = "metrics"):
        os.makedirs(directory, exist_ok=True)
        paths = []
        for ext, text in (("csv", self.to_csv()), ("json", self.to_json())):
            p = os.path.join(directory, f"{stem}.{ext}")
            with open(p, "w") as f:
                f.write(text)
            paths.append(p)
        return paths

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        records = [{k: _parse_value(v) if k != "image_id" else v for k, v in r.items()} for r in d["records"]]
        return cls(d["metrics"], records, d.get("metadata", {}), d.get("unmatched", []))

    def merge_columns(self, path, columns=None):
        """Attach externally computed per-image columns (e.g. NIQE) from a CSV keyed by image_id."""
        with open(path, newline="") as f:
            rows = {r["image_id"]: r for r in csv.DictReader(f) if not r["image_id"].startswith("__")}
        extra = columns or [c for c in next(iter(rows.values())).keys() if c != "image_id"]
        for r in self.records:
            for c in extra:
                if r["image_id"] in rows:
                    r[c] = _parse_value(rows[r["image_id"]][c])
        self.metrics += [c for c in extra if c not in self.metrics]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return INF_SENTINEL if v > 0 else "-" + INF_SENTINEL
    return repr(float(v))


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return INF_SENTINEL if v > 0 else "-" + INF_SENTINEL
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _parse_value(v):
    if v in (INF_SENTINEL, "-" + INF_SENTINEL):
        return float(v)
    if v is None or v == "":
        return math.nan
    return float(v)


def _image_files(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"not a directory: {directory}")
    return {
        os.path.splitext(n)[0]: os.path.join(directory, n)
        for n in sorted(os.listdir(directory))
        if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
    }


def evaluate_folder(pred_dir, ref_dir=None, metrics=("psnr", "ssim", "mse"), workers: int = 1) -> MetricReport:
    """Score every image in ``pred_dir``, pairing with ``ref_dir`` by file stem."""
    metrics = list(metrics)
    needs_ref = [m for m in metrics if m in FULL_REFERENCE]
    if needs_ref and ref_dir is None:
        raise ValueError(f"metrics {needs_ref} need ref_dir")
    preds = _image_files(pred_dir)
    if not preds:
        raise ValueError(f"no images in {pred_dir}")
    report = MetricReport(metrics, metadata={"pred_dir": os.fspath(pred_dir), "ref_dir": ref_dir and os.fspath(ref_dir)})
    if ref_dir is not None:
        refs = _image_files(ref_dir)
        report.unmatched = sorted(
            [preds[s] for s in preds if s not in refs] + [refs[s] for s in refs if s not in preds]
        )
        ids = sorted(s for s in preds if s in refs)
        if not ids:
            raise ValueError(f"no filename matches between {pred_dir} and {ref_dir}")
    else:
        refs, ids = {}, sorted(preds)

    def score(stem):
        pred = load_image(preds[stem])
        target = load_image(refs[stem]) if stem in refs else None
        return compute_metrics(pred, target, metrics)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(score, ids))
    else:
        results = [score(s) for s in ids]
    for stem, values in zip(ids, results):
        report.add(stem, values)
    return report
