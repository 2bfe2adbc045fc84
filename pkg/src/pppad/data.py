"""Synthetic shape-segmentation images.

Shape centres are uniform over the whole image (shapes may be clipped by the
border), so a pixel's class carries no information about its absolute position.
"""

from __future__ import annotations

import colorsys
from typing import Tuple

import numpy as np

SHAPES = ("disc", "rectangle", "triangle", "ring", "diamond")


def class_colors(num_classes: int) -> np.ndarray:
    """Background grey plus evenly spaced hues for the foreground classes."""
    colors = [(0.5, 0.5, 0.5)]
    for k in range(1, num_classes):
        colors.append(colorsys.hsv_to_rgb((k - 1) / (num_classes - 1), 0.7, 0.85))
    return np.array(colors, dtype=np.float64)


def _shape_mask(kind: str, yy, xx, cy, cx, r, rng: np.random.Generator) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "rectangle":
        a, b = rng.uniform(0.5, 1.0, size=2) * r
        return (np.abs(dy) <= a) & (np.abs(dx) <= b)
    if kind == "triangle":
        angle = rng.uniform(0, 2 * np.pi)
        verts = [(cy + r * np.sin(angle + t), cx + r * np.cos(angle + t)) for t in (0, 2 * np.pi / 3, 4 * np.pi / 3)]
        inside = np.ones_like(yy, dtype=bool)
        sign = None
        for (y0, x0), (y1, x1) in zip(verts, verts[1:] + verts[:1]):
            cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
            s = cross >= 0
            sign = s if sign is None else sign
            inside &= s == sign
        return inside
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {kind!r}")


def generate_image(
    rng: np.random.Generator, height: int, width: int, num_classes: int, noise: float = 0.1,
    jitter: float = 0.1,
) -> Tuple[np.ndarray, np.ndarray]:
    """One (3, H, W) image in [0, 1] and its (H, W) integer label map."""
    colors = class_colors(num_classes)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    label = np.zeros((height, width), dtype=np.int64)
    image = np.empty((3, height, width), dtype=np.float64)
    image[:] = colors[0][:, None, None]
    # one shape of every foreground class, plus a few extra random ones
    classes = list(range(1, num_classes)) + list(rng.integers(1, num_classes, size=rng.integers(0, 3)))
    rng.shuffle(classes)
    min_r, max_r = 0.06 * min(height, width), 0.2 * min(height, width)
    for k in classes:
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(min_r, max_r)
        mask = _shape_mask(SHAPES[(k - 1) % len(SHAPES)], yy, xx, cy, cx, r, rng)
        shift = rng.uniform(-jitter, jitter, size=3)
        label[mask] = k
        image[:, mask] = (colors[k] + shift)[:, None]
    image += rng.normal(0, noise, size=image.shape)
    return np.clip(image, 0, 1).astype(np.float32), label


def generate_dataset(
    seed: int, count: int, height: int = 64, width: int = 64, num_classes: int = 4, noise: float = 0.1,
    jitter: float = 0.1,
) -> Tuple[np.ndarray, np.ndarray]:
    """``count`` images of shape (3, H, W) and labels of shape (H, W); deterministic in ``seed``."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if height < 32 or width < 32:
        raise ValueError(f"images must be at least 32x32, got {height}x{width}")
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    pairs = [generate_image(rng, height, width, num_classes, noise, jitter) for _ in range(count)]
    images = np.stack([p[0] for p in pairs])
    labels = np.stack([p[1] for p in pairs])
    missing = set(range(num_classes)) - set(np.unique(labels).tolist())
    if missing:
        raise RuntimeError(f"generated labels miss classes {sorted(missing)}")
    return images, labels
