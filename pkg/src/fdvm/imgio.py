"""8-bit RGB PNG I/O with a linear [0,255] <-> [0,1] mapping.

PNG is the only format written (lossless, deterministic bytes for identical
pixels); reading accepts anything Pillow decodes and converts to RGB.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError

__all__ = ["read_image", "write_image", "list_images"]

_READ_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def read_image(path) -> np.ndarray:
    """Load as float64 (3,H,W) in [0,1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise InputError(f"cannot decode image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, img: np.ndarray):
    """Write a (3,H,W) array in [0,1] as 8-bit RGB PNG (values clipped)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"write_image expects (3,H,W), got {img.shape}")
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def list_images(directory) -> list:
    """Readable image paths under `directory`, sorted for determinism."""
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {directory}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in _READ_SUFFIXES)
