"""Paired dataset ingestion: pairing, resizing, LR synthesis, splits and folds.

Expected on-disk layout for every dataset style is two parallel folders,
one with degraded images and one with references, paired by file stem::

    EUVP     <root>/trainA (degraded)   <root>/trainB (reference)     256x256
    UIEB     <root>/raw-890             <root>/reference-890          resized to 512x512
    UFO-120  <root>/lrd (or hr input)   <root>/hr                     640x480 references

Folder names are supplied by the run config, so any layout works as long
as the two sides share stems (after optional suffix stripping).
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, replace

import cv2
import numpy as np
import torch
import torch.nn.functional as F

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_image(path) -> np.ndarray:
    """Decode an image file to an ``(h, w, 3)`` float64 RGB array in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"image not found: {path}")
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot decode image: {path}")
    if np.issubdtype(img.dtype, np.integer):
        scale = float(np.iinfo(img.dtype).max)
    else:
        scale = 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    img = img[:, :, ::-1]  # BGR -> RGB
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def save_image(img, path):
    """Write an ``(h, w, 3)`` RGB array in [0, 1] (or a ``(3, h, w)`` tensor) as 8-bit."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().permute(1, 2, 0).numpy()
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(img * 255.0).astype(np.uint8)
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(path, np.ascontiguousarray(u8[:, :, ::-1])):
        raise OSError(f"cannot write image: {path}")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def to_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().permute(1, 2, 0).numpy()


def resize(img: np.ndarray, height: int, width: int, method: str = "bicubic") -> np.ndarray:
    """Antialiased resize of an ``(h, w, 3)`` array, clipped back to [0, 1]."""
    if img.shape[:2] == (height, width):
        return img
    flat = img.reshape(-1, img.shape[-1])
    if (flat == flat[0]).all():
        # interpolating a constant gives that constant; skip the kernel's rounding noise
        return np.broadcast_to(flat[0], (height, width, img.shape[-1])).copy()
    t = to_tensor(img)[None]
    kwargs = {"antialias": True, "align_corners": False} if method in ("bicubic", "bilinear") else {}
    out = F.interpolate(t, size=(height, width), mode=method, **kwargs)
    return np.clip(to_array(out[0]), 0.0, 1.0)


def center_crop_divisible(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    nh, nw = h - h % s, w - w % s
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top : top + nh, left : left + nw]


def make_lr(img: np.ndarray, s: int, method: str = "bicubic") -> np.ndarray:
    """Downscale by ``s`` after center-cropping to an ``s``-divisible size."""
    if s not in (2, 3, 4):
        raise ValueError(f"LR scale must be 2, 3 or 4, got {s}")
    img = center_crop_divisible(img, s)
    h, w = img.shape[:2]
    return resize(img, h // s, w // s, method)


@dataclass(frozen=True)
class PreparationPolicy:
    """How a pair is turned into network input and target.

    ``resize`` applies to both sides (``(height, width)`` or None to keep the
    native size). With ``lr_scale`` set, the reference is cropped to an
    ``lr_scale``-divisible size and the degraded image is that crop
    downscaled by ``lr_scale``.
    """

    name: str = "euvp"
    resize: tuple[int, int] | None = (256, 256)
    lr_scale: int | None = None
    interpolation: str = "bicubic"

    def __post_init__(self):
        if self.resize is not None:
            object.__setattr__(self, "resize", tuple(int(v) for v in self.resize))
        if self.lr_scale is not None and self.lr_scale not in (2, 3, 4):
            raise ValueError(f"lr_scale must be 2, 3 or 4, got {self.lr_scale}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "PreparationPolicy":
        presets = {
            "euvp": cls("euvp", (256, 256)),
            "uieb": cls("uieb", (512, 512)),
            "ufo120": cls("ufo120", None, lr_scale=2),
            "native": cls("native", None),
        }
        if name not in presets:
            raise ValueError(f"unknown policy {name!r}; choose from {sorted(presets)}")
        return replace(presets[name], **overrides)

    def apply(self, degraded: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.resize is not None:
            degraded = resize(degraded, *self.resize, self.interpolation)
            reference = resize(reference, *self.resize, self.interpolation)
        if self.lr_scale is not None:
            if degraded.shape != reference.shape:
                degraded = resize(degraded, *reference.shape[:2], self.interpolation)
            reference = center_crop_divisible(reference, self.lr_scale)
            degraded = make_lr(degraded, self.lr_scale, self.interpolation)
        elif degraded.shape != reference.shape:
            raise ValueError(f"pair sizes differ after preparation: {degraded.shape} vs {reference.shape}")
        return degraded, reference


@dataclass(frozen=True)
class PairRecord:
    degraded_path: str
    reference_path: str
    split: str = "train"
    fold: int | None = None

    @property
    def image_id(self) -> str:
        return os.path.splitext(os.path.basename(self.degraded_path))[0]


@dataclass
class DatasetManifest:
    name: str
    root: str
    records: list[PairRecord]
    policy: PreparationPolicy = field(default_factory=PreparationPolicy)
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.degraded_path in seen:
                raise ValueError(f"duplicate degraded path in manifest: {r.degraded_path}")
            seen.add(r.degraded_path)

    def __len__(self):
        return len(self.records)

    def subset(self, records, name=None, split=None) -> "DatasetManifest":
        if split is not None:
            records = [replace(r, split=split) for r in records]
        return DatasetManifest(name or self.name, self.root, list(records), self.policy, self.seed, [])

    def to_json(self) -> str:
        d = {
            "name": self.name,
            "root": self.root,
            "seed": self.seed,
            "policy": asdict(self.policy),
            "records": [asdict(r) for r in self.records],
            "warnings": self.warnings,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            name=d["name"],
            root=d["root"],
            records=[PairRecord(**r) for r in d["records"]],
            policy=PreparationPolicy(**d["policy"]),
            seed=d["seed"],
            warnings=list(d.get("warnings", [])),
        )

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_json(f.read())


def _stems(directory, strip_suffix=""):
    out = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        if strip_suffix and stem.endswith(strip_suffix):
            stem = stem[: -len(strip_suffix)]
        out[stem] = os.path.join(directory, name)
    return out


def scan_paired_dirs(
    degraded_dir,
    reference_dir,
    name: str = "dataset",
    policy: PreparationPolicy | None = None,
    seed: int = 0,
    degraded_suffix: str = "",
    reference_suffix: str = "",
) -> DatasetManifest:
    """Pair images by file stem, sorted lexicographically.

    ``degraded_suffix``/``reference_suffix`` are stripped from stems before
    matching (e.g. ``"_raw"`` / ``"_ref"``). Unmatched files end up in
    ``manifest.warnings``.
    """
    for d in (degraded_dir, reference_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"not a directory: {d}")
    deg = _stems(degraded_dir, degraded_suffix)
    ref = _stems(reference_dir, reference_suffix)
    common = sorted(set(deg) & set(ref))
    if not common:
        raise ValueError(f"no image pairs found between {degraded_dir} and {reference_dir}")
    notes = [f"unmatched degraded image: {deg[s]}" for s in sorted(set(deg) - set(ref))]
    notes += [f"unmatched reference image: {ref[s]}" for s in sorted(set(ref) - set(deg))]
    for n in notes:
        warnings.warn(n)
    root = os.path.commonpath([os.path.abspath(degraded_dir), os.path.abspath(reference_dir)])
    records = [PairRecord(deg[s], ref[s]) for s in common]
    return DatasetManifest(name, root, records, policy or PreparationPolicy(), seed, notes)


def kfold_split(
    manifest: DatasetManifest,
    k: int = 5,
    seed: int | None = None,
    policy: str = "partition",
    test_size: int | None = None,
) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Deterministic train/test folds.

    ``policy="partition"`` splits a seeded permutation into ``k`` near-equal
    disjoint test folds. ``policy="holdout"`` draws ``k`` disjoint test sets
    of ``test_size`` records each (UIEB protocol: 90 test / 800 train out of
    890), training on everything else.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    n = len(manifest)
    seed = manifest.seed if seed is None else seed
    perm = np.random.default_rng(seed).permutation(n)
    if policy == "partition":
        if n < k:
            raise ValueError(f"need at least {k} records for {k} folds, have {n}")
        test_idx = np.array_split(perm, k)
    elif policy == "holdout":
        if test_size is None or test_size < 1:
            raise ValueError("holdout policy needs a positive test_size")
        if test_size * k > n:
            raise ValueError(f"{k} disjoint test sets of {test_size} need {test_size * k} records, have {n}")
        test_idx = [perm[i * test_size : (i + 1) * test_size] for i in range(k)]
    else:
        raise ValueError(f"unknown fold policy {policy!r}")

    folds = []
    for i, idx in enumerate(test_idx):
        in_test = set(int(j) for j in idx)
        train = [replace(r, split="train", fold=i) for j, r in enumerate(manifest.records) if j not in in_test]
        test = [replace(manifest.records[j], split="test", fold=i) for j in sorted(in_test)]
        folds.append((
            manifest.subset(train, f"{manifest.name}-fold{i}-train"),
            manifest.subset(test, f"{manifest.name}-fold{i}-test"),
        ))
    return folds


def uieb_protocol(manifest: DatasetManifest, repeats: int = 5, test_size: int = 90, seed: int | None = None):
    """Random 800/90 UIEB split repeated ``repeats`` times with disjoint test sets."""
    return kfold_split(manifest, k=repeats, seed=seed, policy="holdout", test_size=test_size)


def load_pair(record: PairRecord, policy: PreparationPolicy) -> tuple[np.ndarray, np.ndarray]:
    return policy.apply(load_image(record.degraded_path), load_image(record.reference_path))


def prepare_batch(records, policy: PreparationPolicy, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode, prepare and stack records into ``(n, 3, h, w)`` tensors."""
    records = list(records)
    if not records:
        raise ValueError("empty batch")
    pairs = [load_pair(r, policy) for r in records]
    shapes = {(d.shape, t.shape) for d, t in pairs}
    if len(shapes) != 1:
        raise ValueError(f"non-uniform shapes in batch: {sorted(shapes)}; set a resize policy")
    deg = torch.stack([to_tensor(d) for d, _ in pairs]).to(dtype)
    ref = torch.stack([to_tensor(t) for _, t in pairs]).to(dtype)
    return deg, ref


class PairedImageDataset(torch.utils.data.Dataset):
    """Map-style dataset over a manifest; optionally keeps decoded pairs in memory."""

    def __init__(self, manifest: DatasetManifest, cache: bool = True, dtype=torch.float32):
        self.manifest = manifest
        self.cache = {} if cache else None
        self.dtype = dtype

    def __len__(self):
        return len(self.manifest.records)

    def __getitem__(self, i):
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        d, t = load_pair(self.manifest.records[i], self.manifest.policy)
        item = (to_tensor(d).to(self.dtype), to_tensor(t).to(self.dtype))
        if self.cache is not None:
            self.cache[i] = item
        return item

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        items = [self[int(i)] for i in indices]
        return torch.stack([d for d, _ in items]), torch.stack([t for _, t in items])
