"""Small grayscale image corpus built from the photographs bundled with scikit-image.

Used for desk-scale training and the demos when no BSD-300 copy is at hand.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import write_netpbm

__all__ = ["NATURAL_IMAGES", "build_demo_corpus"]

NATURAL_IMAGES = (
    "astronaut", "brick", "camera", "cat", "cell", "chelsea", "clock", "coffee", "coins",
    "grass", "gravel", "hubble_deep_field", "immunohistochemistry", "microaneurysms", "moon",
    "motorcycle_left", "motorcycle_right", "page", "retina", "rocket", "text",
)


def _load(name: str) -> np.ndarray:
    from skimage import data

    if name.startswith("motorcycle_"):
        left, right, _ = data.stereo_motorcycle()
        return left if name.endswith("left") else right
    return getattr(data, name)()


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.max() > 1:
        img = img / 255.0
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return np.clip(img, 0, 1)


def _shrink(img: np.ndarray, max_side: int) -> np.ndarray:
    from PIL import Image

    h, w = img.shape
    if max(h, w) <= max_side:
        return img
    scale = max_side / max(h, w)
    pil = Image.fromarray(img.astype(np.float32), mode="F")
    out = pil.resize((round(w * scale), round(h * scale)), Image.BICUBIC)
    return np.clip(np.asarray(out, dtype=np.float64), 0, 1)


def build_demo_corpus(out_dir, tile: int = 96, per_image: int = 3, max_side: int = 512,
                      min_std: float = 0.04, val_every: int = 5) -> tuple[Path, Path]:
    """Write 8-bit PGM tiles into ``out_dir/train`` and ``out_dir/val``.

    Each source photo contributes up to ``per_image`` non-overlapping tiles
    whose standard deviation exceeds ``min_std``; every ``val_every``-th tile
    (in generation order) is held out.  Returns the two directories.
    """
    out_dir = Path(out_dir)
    train_dir, val_dir = out_dir / "train", out_dir / "val"
    train_dir.mkdir(parents=True, exist_ok=True)
    val_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for name in NATURAL_IMAGES:
        img = _shrink(_gray(_load(name)), max_side)
        h, w = img.shape
        kept = 0
        for top in range(0, h - tile + 1, tile):
            for left in range(0, w - tile + 1, tile):
                crop = img[top:top + tile, left:left + tile]
                if crop.std() < min_std or kept >= per_image:
                    continue
                target = val_dir if count % val_every == val_every - 1 else train_dir
                write_netpbm(target / f"{name}_{kept:02d}.pgm", crop)
                kept += 1
                count += 1
    return train_dir, val_dir
