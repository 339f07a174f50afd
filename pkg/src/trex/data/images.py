"""8-bit RGB image I/O (PNG / PPM) and an in-memory store keyed by manifest path."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load as ``uint8 [H, W, 3]``, bilinearly resized to ``size=(H, W)`` when given."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write ``uint8 [H, W, 3]``; format follows the suffix (``.png`` or ``.ppm``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image suffix {path.suffix!r}; use .png or .ppm")
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format=fmt)


class ImageStore:
    """Lazily loads manifest images relative to ``root`` and caches them."""

    def __init__(self, root: str | Path, size: tuple[int, int]):
        self.root = Path(root)
        self.size = tuple(size)
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_arrays(cls, images: dict[str, np.ndarray], size: tuple[int, int]) -> "ImageStore":
        store = cls(".", size)
        for key, img in images.items():
            if img.shape[:2] != store.size:
                img = np.asarray(Image.fromarray(img).resize((size[1], size[0]), Image.BILINEAR))
            store._cache[key] = img
        return store

    def __getitem__(self, key: str) -> np.ndarray:
        img = self._cache.get(key)
        if img is None:
            img = self._cache[key] = read_image(self.root / key, self.size)
        return img


def to_model_input(batch: np.ndarray) -> np.ndarray:
    """``uint8 [..., H, W, 3] -> float32`` roughly centred on zero."""
    return (batch.astype(np.float32) / 255.0 - 0.5) / 0.25
