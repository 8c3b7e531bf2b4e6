"""Dataset manifests, on-the-fly augmentation and torch datasets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .backbone import IMAGENET_MEAN, IMAGENET_STD
from .io import list_by_stem, read_image, read_mask, write_mask

SPLITS = ("train", "val", "test")
KNOWN_DATASETS = ("Kvasir", "CVC-ClinicDB", "CVC-300", "CVC-ColonDB", "ETIS")


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    dataset_id: str
    entries: tuple          # (split, image path, mask path), sorted by split then stem
    split_seed: int | None = None

    def pairs(self, split=None) -> list[tuple[Path, Path]]:
        return [(img, msk) for s, img, msk in self.entries if split is None or s == split]

    @property
    def counts(self) -> dict:
        return {s: sum(1 for e in self.entries if e[0] == s) for s in SPLITS}

    def to_text(self) -> str:
        return "".join(f"{s}\t{img}\t{msk}\n" for s, img, msk in self.entries)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path, root=None, dataset_id=None) -> "DatasetManifest":
        entries = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: expected 'split<TAB>image<TAB>mask'")
            entries.append((parts[0], Path(parts[1]), Path(parts[2])))
        root = Path(root) if root else Path(path).parent
        return cls(root, dataset_id or infer_dataset_id(root), tuple(entries))


def infer_dataset_id(root) -> str:
    name = Path(root).resolve().name
    return name if name in KNOWN_DATASETS else "custom"


def find_pairs(root) -> list[tuple[str, Path, Path]]:
    root = Path(root)
    images = list_by_stem(root / "images")
    masks = list_by_stem(root / "masks")
    if not images:
        raise ValueError(f"no images found under {root / 'images'}")
    missing = sorted(images.keys() ^ masks.keys())
    if missing:
        raise ValueError(f"image/mask stems do not pair up under {root}, e.g. {missing[:5]}")
    return [(s, images[s], masks[s]) for s in sorted(images)]


def split_counts(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def build_manifest(root, split_seed=3407, dataset_id=None) -> DatasetManifest:
    """Shuffle the paired files under ``root`` into a deterministic 80/10/10 split."""
    pairs = find_pairs(root)
    order = np.random.default_rng(split_seed).permutation(len(pairs))
    n_train, n_val, _ = split_counts(len(pairs))
    entries = []
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        entries.append((split, pairs[idx][0], pairs[idx][1], pairs[idx][2]))
    entries.sort(key=lambda e: (SPLITS.index(e[0]), e[1]))
    return DatasetManifest(Path(root), dataset_id or infer_dataset_id(root),
                           tuple((s, img, msk) for s, _, img, msk in entries), split_seed)


def full_manifest(root, dataset_id=None) -> DatasetManifest:
    """Every pair under ``root`` in the test split (benchmark sets are test-only)."""
    entries = tuple(("test", img, msk) for _, img, msk in find_pairs(root))
    return DatasetManifest(Path(root), dataset_id or Path(root).resolve().name, entries)


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    train_size: int = 352
    scale: bool = True
    scale_range: tuple = (0.75, 1.25)
    crop: bool = True
    crop_fraction: float = 0.8
    flip: bool = True
    flip_prob: float = 0.5
    noise: bool = True
    noise_std: tuple = (0.0, 0.05)
    contrast: bool = True
    contrast_range: tuple = (0.8, 1.2)
    brightness: bool = True
    brightness_range: tuple = (0.8, 1.2)
    sharpness: bool = True
    sharpness_range: tuple = (0.8, 1.2)
    morphology: bool = True
    morph_kernel: tuple = (2, 5)
    morph_prob: float = 0.5
    seed: int = 3407

    def __post_init__(self):
        lo, hi = self.morph_kernel
        if not 2 <= lo <= hi <= 5:
            raise ValueError(f"morph_kernel must lie within [2, 5], got {self.morph_kernel}")
        for name in ("flip_prob", "morph_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop_fraction must lie in (0, 1]")

    @classmethod
    def disabled(cls, train_size=352, **kw) -> "AugmentationConfig":
        off = dict(scale=False, crop=False, flip=False, noise=False, contrast=False,
                   brightness=False, sharpness=False, morphology=False)
        off.update(kw)
        return cls(train_size=train_size, **off)


@dataclass(frozen=True)
class AugParams:
    in_size: tuple                  # (H, W) of the source
    scale: float = 1.0
    crop: tuple | None = None       # (top, left, height, width) in scaled coordinates
    hflip: bool = False
    vflip: bool = False
    morph: tuple | None = None      # ("dilate" | "erode", kernel side)
    photometric: dict = field(default_factory=dict)


def sample_params(cfg: AugmentationConfig, in_size, rng) -> AugParams:
    h, w = in_size
    scale = 1.0
    crop = None
    if cfg.crop:
        ch, cw = max(1, round(cfg.crop_fraction * h)), max(1, round(cfg.crop_fraction * w))
    for _ in range(10):
        scale = float(rng.uniform(*cfg.scale_range)) if cfg.scale else 1.0
        sh, sw = scaled_size(in_size, scale)
        if not cfg.crop or (sh >= ch and sw >= cw):
            break
    else:
        scale, (sh, sw) = 1.0, (h, w)
    if cfg.crop:
        crop = (int(rng.integers(0, sh - ch + 1)), int(rng.integers(0, sw - cw + 1)), ch, cw)
    hflip = vflip = False
    if cfg.flip:
        hflip = bool(rng.random() < cfg.flip_prob)
        vflip = bool(rng.random() < cfg.flip_prob)
    morph = None
    if cfg.morphology and rng.random() < cfg.morph_prob:
        op = "dilate" if rng.random() < 0.5 else "erode"
        morph = (op, int(rng.integers(cfg.morph_kernel[0], cfg.morph_kernel[1] + 1)))
    photo = {}
    if cfg.contrast:
        photo["contrast"] = float(rng.uniform(*cfg.contrast_range))
    if cfg.brightness:
        photo["brightness"] = float(rng.uniform(*cfg.brightness_range))
    if cfg.sharpness:
        photo["sharpness"] = float(rng.uniform(*cfg.sharpness_range))
    if cfg.noise:
        photo["noise_std"] = float(rng.uniform(*cfg.noise_std))
        photo["noise_seed"] = int(rng.integers(0, 2 ** 31))
    return AugParams(tuple(in_size), scale, crop, hflip, vflip, morph, photo)


def scaled_size(size, scale):
    return max(1, round(size[0] * scale)), max(1, round(size[1] * scale))


def resize_image(img, size):
    """Bilinear resize of an (H, W, C) float image to ``size=(H, W)``."""
    if img.shape[:2] == tuple(size):
        return img
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32)).resize(
        (size[1], size[0]), Image.BILINEAR)) for c in range(img.shape[2])]
    return np.stack(chans, axis=-1)


def resize_mask(mask, size):
    """Nearest-neighbour resize, re-binarised at 0.5."""
    if mask.shape == tuple(size):
        return mask.astype(bool)
    im = Image.fromarray(mask.astype(np.uint8) * 255).resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(im) >= 128


def apply_geometric(arr, params: AugParams, out_size, kind="image"):
    resize = resize_image if kind == "image" else resize_mask
    arr = resize(arr, scaled_size(params.in_size, params.scale))
    if params.crop is not None:
        t, l, ch, cw = params.crop
        arr = arr[t:t + ch, l:l + cw]
    if params.hflip:
        arr = arr[:, ::-1]
    if params.vflip:
        arr = arr[::-1]
    return resize(np.ascontiguousarray(arr), out_size)


def morph_jitter(mask, op, kernel):
    """Dilate or erode with a square ``kernel``; erosion that would empty the mask is skipped."""
    structure = np.ones((kernel, kernel), dtype=bool)
    if op == "dilate":
        return ndimage.binary_dilation(mask, structure=structure)
    if op == "erode":
        out = ndimage.binary_erosion(mask, structure=structure)
        return out if out.any() or not mask.any() else mask
    raise ValueError(f"unknown morphology op {op!r}")


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def apply_photometric(img, photo: dict):
    img = img.astype(np.float32, copy=True)
    if "contrast" in photo:
        gray = (img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)).mean()
        img = gray + photo["contrast"] * (img - gray)
    if "brightness" in photo:
        img = img * photo["brightness"]
    if "sharpness" in photo:
        blurred = np.stack([ndimage.correlate(img[..., c], _SMOOTH, mode="nearest")
                            for c in range(img.shape[2])], axis=-1)
        img = blurred + photo["sharpness"] * (img - blurred)
    if photo.get("noise_std", 0.0) > 0:
        noise_rng = np.random.default_rng(photo["noise_seed"])
        img = img + noise_rng.normal(0.0, photo["noise_std"], img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def replay_mask(mask, params: AugParams, out_size):
    out = apply_geometric(mask, params, out_size, kind="mask")
    if params.morph is not None:
        out = morph_jitter(out, *params.morph)
    return out


def augment(image, mask, cfg: AugmentationConfig, rng, return_params=False):
    """Augment an aligned (image, mask) pair and resize both to ``cfg.train_size``.

    Geometric ops hit both arrays; photometric ops only the image; morphology
    only the mask.
    """
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} are not aligned")
    out_size = (cfg.train_size, cfg.train_size)
    params = sample_params(cfg, mask.shape, rng)
    img = apply_photometric(apply_geometric(image, params, out_size, "image"), params.photometric)
    msk = replay_mask(mask.astype(bool), params, out_size)
    return (img, msk, params) if return_params else (img, msk)


# -- torch datasets ------------------------------------------------------------

def to_tensor(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    arr = (img - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32))


class PolypDataset(torch.utils.data.Dataset):
    """Image/mask pairs resized to ``train_size``; augmented when ``aug`` is given.

    Each item draws from its own rng stream keyed by (seed, epoch, index), so
    results do not depend on worker scheduling.
    """

    def __init__(self, pairs, train_size=352, aug: AugmentationConfig | None = None, seed=3407,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.pairs = list(pairs)
        self.train_size = train_size
        self.aug = aug
        self.seed = seed
        self.epoch = 0
        self.mean, self.std = mean, std

    def __len__(self):
        return len(self.pairs)

    def load(self, index, epoch=None):
        img_path, mask_path = self.pairs[index]
        image, mask = read_image(img_path), read_mask(mask_path)
        size = (self.train_size, self.train_size)
        if self.aug is None:
            return resize_image(image, size), resize_mask(mask, size)
        rng = np.random.default_rng([self.seed, self.epoch if epoch is None else epoch, index])
        return augment(image, mask, self.aug, rng)

    def __getitem__(self, index):
        image, mask = self.load(index)
        mask_t = torch.from_numpy(mask.astype(np.float32))[None]
        return to_tensor(image, self.mean, self.std), mask_t, Path(self.pairs[index][0]).stem


class InferenceDataset(torch.utils.data.Dataset):
    """Images resized for the network, with their original size for upsampling back."""

    def __init__(self, image_paths, size=352, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.paths = list(image_paths)
        self.size = size
        self.mean, self.std = mean, std

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        image = read_image(self.paths[index])
        orig = image.shape[:2]
        tensor = to_tensor(resize_image(image, (self.size, self.size)), self.mean, self.std)
        return tensor, Path(self.paths[index]).stem, torch.tensor(orig)


# -- synthetic data --------------------------------------------------------------

def synthetic_pair(rng, size=64):
    """A textured background with one or two elliptical 'polyps' of a different tint."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        ry, rx = rng.uniform(0.1, 0.22, 2) * size
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    base = np.array([0.75, 0.35, 0.3], dtype=np.float32)
    polyp = np.array([0.95, 0.75, 0.55], dtype=np.float32)
    img = np.where(mask[..., None], polyp, base)
    img = img + rng.normal(0, 0.04, img.shape).astype(np.float32)
    return np.clip(img, 0, 1), mask


def write_synthetic_corpus(root, n=8, size=64, seed=0) -> Path:
    """Write ``n`` synthetic pairs in the ``images/`` + ``masks/`` layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img, mask = synthetic_pair(rng, size)
        (root / "images").mkdir(parents=True, exist_ok=True)
        Image.fromarray((img * 255).round().astype(np.uint8)).save(root / "images" / f"{i:04d}.png")
        write_mask(mask, root / "masks" / f"{i:04d}.png")
    return root
