"""Image and mask file helpers."""
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def list_by_stem(directory) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    found = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            if path.stem in found:
                raise ValueError(f"duplicate stem {path.stem!r} in {directory}")
            found[path.stem] = path
    return found


def read_image(path) -> np.ndarray:
    """RGB image as float32 in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path, threshold=128) -> np.ndarray:
    """8-bit mask file binarised at ``threshold`` (datasets ship anti-aliased edges)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= threshold


def read_prob_map(path, size=None) -> np.ndarray:
    """Grayscale prediction as float64 in [0, 1], optionally resized to ``size=(H, W)``."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            arr = np.asarray(im, dtype=np.float32)
            im = Image.fromarray(arr).resize((size[1], size[0]), Image.BILINEAR)
        return np.clip(np.asarray(im, dtype=np.float64) / 255.0, 0.0, 1.0)


def write_prob_map(prob, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(prob, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def write_mask(mask, path) -> Path:
    return write_prob_map(np.asarray(mask, dtype=np.float64), path)
