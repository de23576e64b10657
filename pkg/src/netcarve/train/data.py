"""Synthetic segmentation dataset: colored geometric shapes on a noisy field.

Stands in for a real driving dataset at desk scale. Every image contains one
shape per foreground class (disk, square, triangle), so every class is
present in every split by construction. Generation is deterministic from the
spec seed; augmentation (random horizontal flip plus crop-and-resize with
scale in [0.5, 2]) happens at load time from the training rng.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..executor import resize_bilinear

SHAPE_COLORS = (
    (0.85, 0.25, 0.2),   # disk
    (0.2, 0.8, 0.3),     # square
    (0.25, 0.35, 0.9),   # triangle
)
BACKGROUND = (0.45, 0.45, 0.45)
SCALE_RANGE = (0.5, 2.0)


@dataclass
class SyntheticDatasetSpec:
    image_size: int = 64
    n_classes: int = 4  # background + up to 3 shapes
    train_samples: int = 32
    val_samples: int = 8
    noise: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= 4:
            raise ValueError("n_classes must be in [2, 4] (background + 1..3 shapes)")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    n_classes: int


def _shape_mask(kind, size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # square
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r
    # isoceles triangle pointing up
    inside_rows = (yy >= cy - r) & (yy <= cy + r)
    half_width = (yy - (cy - r)) / 2.0
    return inside_rows & (np.abs(xx - cx) <= half_width)


def _render(rng, size, n_classes, noise):
    img = np.empty((3, size, size), dtype=np.float32)
    for ch, base in enumerate(BACKGROUND):
        img[ch] = base
    label = np.zeros((size, size), dtype=np.int64)
    for cls in range(1, n_classes):
        r = rng.integers(size // 8, size // 4)
        cy = rng.integers(r, size - r)
        cx = rng.integers(r, size - r)
        mask = _shape_mask(cls - 1, size, cy, cx, r)
        for ch in range(3):
            img[ch][mask] = SHAPE_COLORS[cls - 1][ch]
        label[mask] = cls
    img += rng.normal(0.0, noise, img.shape).astype(np.float32)
    return img, label


def generate_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)

    def split(n):
        images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
        labels = np.empty((n, spec.image_size, spec.image_size), dtype=np.int64)
        for i in range(n):
            images[i], labels[i] = _render(rng, spec.image_size, spec.n_classes, spec.noise)
        return images, labels

    train_images, train_labels = split(spec.train_samples)
    val_images, val_labels = split(spec.val_samples)
    return Dataset(train_images, train_labels, val_images, val_labels, spec.n_classes)


def _nearest_indices(out_dim, scale, in_dim):
    idx = np.floor((np.arange(out_dim) + 0.5) / scale).astype(np.int64)
    return np.clip(idx, 0, in_dim - 1)


def augment_batch(images, labels, rng):
    """Random horizontal flip and crop-and-resize (scale in [0.5, 2]) per sample."""
    n, _, h, w = images.shape
    out_images = np.empty_like(images)
    out_labels = np.empty_like(labels)
    for i in range(n):
        img = images[i:i + 1]
        lab = labels[i]
        if rng.random() < 0.5:
            img = img[:, :, :, ::-1]
            lab = lab[:, ::-1]
        scale = rng.uniform(*SCALE_RANGE)
        sh, sw = int(np.floor(h * scale)), int(np.floor(w * scale))
        scaled = resize_bilinear(np.ascontiguousarray(img), scale, scale)
        lab_scaled = lab[_nearest_indices(sh, scale, h)][:, _nearest_indices(sw, scale, w)]
        if sh >= h:
            top = rng.integers(0, sh - h + 1)
            left = rng.integers(0, sw - w + 1)
            out_images[i] = scaled[0, :, top:top + h, left:left + w]
            out_labels[i] = lab_scaled[top:top + h, left:left + w]
        else:
            top = rng.integers(0, h - sh + 1)
            left = rng.integers(0, w - sw + 1)
            canvas = np.zeros((3, h, w), dtype=images.dtype)
            canvas[:, top:top + sh, left:left + sw] = scaled[0]
            out_images[i] = canvas
            lab_canvas = np.zeros((h, w), dtype=labels.dtype)
            lab_canvas[top:top + sh, left:left + sw] = lab_scaled
            out_labels[i] = lab_canvas
    return out_images, out_labels
