"""Seeded synthetic lesion images for desk-scale testing.

Both generators draw a noisy dark "skin" field with one elliptical lesion;
the segmentation set varies lesion geometry, the classification set gives
each class its own lesion colour.
"""

from __future__ import annotations

import numpy as np

from .tensor import seeded_rng

# one well-separated lesion colour per class
CLASS_COLORS = np.array([
    [230, 60, 60], [60, 230, 60], [60, 60, 230], [230, 230, 60],
    [230, 60, 230], [60, 230, 230], [240, 240, 240], [150, 90, 40],
], dtype=np.float64)


def ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, angle: float = 0.0) -> np.ndarray:
    """Analytic rasterisation: pixel centres inside the (rotated) ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(25, 55)
    return base + rng.normal(0, 6, size=(size, size, 3))


def lesion_image(rng: np.random.Generator, size: int, color, noise: float = 8.0, disc: bool = False):
    """One image and its ground-truth mask."""
    r_min, r_max = 0.18 * size, 0.32 * size
    ry = rng.uniform(r_min, r_max)
    rx = ry if disc else rng.uniform(r_min, r_max)
    margin = max(ry, rx) + 1
    cy = rng.uniform(margin, size - 1 - margin)
    cx = rng.uniform(margin, size - 1 - margin)
    mask = ellipse_mask(size, cy, cx, ry, rx, 0.0 if disc else rng.uniform(0, np.pi))
    img = _background(rng, size)
    lesion = np.asarray(color, dtype=np.float64) + rng.normal(0, noise, size=(size, size, 3))
    img[mask == 1] = lesion[mask == 1]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def disc_dataset(n: int, size: int = 64, seed: int = 0, discs_only: bool = False):
    """``n`` bright lesions on dark fields, as ``(images, masks)`` lists."""
    rng = seeded_rng(seed, "discs")
    images, masks = [], []
    for _ in range(n):
        color = rng.uniform(170, 235, size=3)
        img, m = lesion_image(rng, size, color, disc=discs_only)
        images.append(img)
        masks.append(m)
    return images, masks


def classification_dataset(per_class: int, size: int = 64, seed: int = 0, n_classes: int = 8):
    """Colour-separable lesions: ``(images, masks, labels)`` grouped class by class."""
    rng = seeded_rng(seed, "classes")
    images, masks, labels = [], [], []
    for c in range(n_classes):
        for _ in range(per_class):
            img, m = lesion_image(rng, size, CLASS_COLORS[c])
            images.append(img)
            masks.append(m)
            labels.append(c)
    return images, masks, np.array(labels, dtype=np.int64)
