"""Datasets: a deterministic synthetic shape generator for desk-scale runs
and a loader for the on-disk images/ + masks/ directory layout."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .images import load_image, load_mask


class DatasetError(ValueError):
    """Raised for malformed dataset directories or specs."""


@dataclass(frozen=True)
class SyntheticSpec:
    count: int
    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise DatasetError("count must be positive")
        if self.size < 4:
            raise DatasetError("size must be at least 4")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise DatasetError("need 1 <= min_shapes <= max_shapes")
        if self.noise < 0:
            raise DatasetError("noise amplitude must be non-negative")


@dataclass(frozen=True)
class DatasetSpec:
    root: str

    def __post_init__(self):
        for sub in ("images", "masks"):
            if not os.path.isdir(os.path.join(self.root, sub)):
                raise DatasetError(f"missing {sub}/ under {self.root}")


def synth_dataset(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Random filled ellipses and rectangles on a dark background.

    Returns (images, masks): float32 (N, 1, S, S) in [0, 1] and int64
    (N, S, S) in {0, 1}. Foreground renders at 1.0 over background 0.2,
    then uniform noise of the given amplitude is added and clipped, so a
    zero-noise image takes exactly the values {0.2, 1.0}. Deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s]
    images = np.empty((spec.count, 1, s, s), dtype=np.float32)
    masks = np.empty((spec.count, s, s), dtype=np.int64)
    for i in range(spec.count):
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            cy, cx = rng.uniform(0.2 * s, 0.8 * s, 2)
            ry, rx = rng.uniform(0.08 * s, 0.25 * s, 2)
            if rng.uniform() < 0.5:
                mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                mask |= (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img = np.where(mask, 1.0, 0.2)
        if spec.noise > 0:
            img = img + rng.uniform(-spec.noise, spec.noise, (s, s))
        images[i, 0] = np.clip(img, 0.0, 1.0)
        masks[i] = mask
    return images, masks


def load_dataset(root: str) -> tuple[np.ndarray, np.ndarray]:
    """Load image/mask pairs matched by file stem from root/images and
    root/masks. All pairs must share one spatial size."""
    spec = DatasetSpec(root)
    img_dir = os.path.join(spec.root, "images")
    mask_dir = os.path.join(spec.root, "masks")
    mask_by_stem = {
        os.path.splitext(f)[0]: os.path.join(mask_dir, f)
        for f in sorted(os.listdir(mask_dir))
    }
    images, masks = [], []
    for fname in sorted(os.listdir(img_dir)):
        stem = os.path.splitext(fname)[0]
        if stem not in mask_by_stem:
            raise DatasetError(f"image {fname!r} has no mask with stem {stem!r}")
        img = load_image(os.path.join(img_dir, fname))
        mask = load_mask(mask_by_stem[stem])
        if img.shape != mask.shape:
            raise DatasetError(
                f"{stem}: image {img.shape} and mask {mask.shape} differ in size"
            )
        images.append(img[None])
        masks.append(mask)
    if not images:
        raise DatasetError(f"no image/mask pairs under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetError(f"images disagree in size: {sorted(shapes)}")
    return np.stack(images).astype(np.float32), np.stack(masks)
