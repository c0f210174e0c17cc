"""Procedural shapes dataset for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .imagery import BoundingBox, DatasetManifest, LabeledImage

SHAPE_CLASSES = ("circle", "square", "triangle")


def _background(rng, size):
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    ramp = np.linspace(0, 1, size)
    if rng.random() < 0.5:
        ramp = ramp[:, None, None] * np.ones((1, size, 1))
    else:
        ramp = ramp[None, :, None] * np.ones((size, 1, 1))
    img = c0 + (c1 - c0) * ramp
    blobs = np.kron(rng.normal(0, 0.08, (size // 8, size // 8, 3)), np.ones((8, 8, 1)))
    return np.clip(img + blobs + rng.normal(0, 0.02, img.shape), 0, 1)


def _mask(kind, yy, xx, cx, cy, r):
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # upward triangle inscribed in the square of half-side r
    top, bottom = cy - r, cy + r
    frac = (yy - top) / (2 * r)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * r)


def make_shapes_image(rng: np.random.Generator, size: int = 64, max_objects: int = 3,
                      min_radius: float = 5.0, max_radius: float = 13.0):
    img = _background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    boxes, placed = [], []
    for _ in range(rng.integers(1, max_objects + 1)):
        for _attempt in range(20):
            r = rng.uniform(min_radius, max_radius)
            cx, cy = rng.uniform(r + 1, size - r - 1, 2)
            if all((cx - px) ** 2 + (cy - py) ** 2 > (r + pr + 2) ** 2 for px, py, pr in placed):
                break
        else:
            continue
        cls = int(rng.integers(len(SHAPE_CLASSES)))
        kind = SHAPE_CLASSES[cls]
        m = _mask(kind, yy, xx, cx, cy, r)
        if not m.any():
            continue
        bg = img[m].mean(0)
        color = rng.uniform(0, 1, 3)
        if np.abs(color - bg).sum() < 0.6:
            color = 1.0 - bg
        img[m] = np.clip(color + rng.normal(0, 0.03, (m.sum(), 3)), 0, 1)
        ys, xs = np.nonzero(m)
        x1, x2 = xs.min() / size, (xs.max() + 1) / size
        y1, y2 = ys.min() / size, (ys.max() + 1) / size
        boxes.append(BoundingBox.from_xyxy(cls, x1, y1, x2, y2))
        placed.append((cx, cy, r))
    return img, boxes


def make_shapes_dataset(n: int, size: int = 64, seed: int = 0, split: str = "train",
                        name: str = "shapes", prefix: str | None = None) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    prefix = prefix or f"{name}_{split}"
    entries = []
    for i in range(n):
        img, boxes = make_shapes_image(rng, size)
        entries.append(LabeledImage(f"{prefix}_{i:05d}", img, tuple(boxes)))
    return DatasetManifest(name, tuple(entries), SHAPE_CLASSES, split)
