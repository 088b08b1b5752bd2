"""Deterministic synthetic image datasets, written as IDX files.

The digit surrogate stands in for MNIST where the real archive is not
available: 28x28 grayscale images in [0,1], 10 balanced classes, and the
same gross pixel statistics that drive input-space geometry — a mostly
dark background with sparse bright strokes, so per-sample standard
deviations sit near 0.3 and Gaussian-resampled images land far off the
data manifold. Every class shares a fixed stroke scaffold (digits overlap
heavily) plus a small class-specific stroke set; samples are integer
translations with brightness jitter and faint smooth noise, so classes
form nonlinear translation-orbit manifolds. Everything is a pure function
of the seed. The generator emits standard IDX image/label files and real
MNIST drops into the same manifest slots.

A tiny 2-D blob fixture (stored as 1x2 "images") backs the fast pipeline
smoke tests.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import write_idx_images, write_idx_labels


def _stroke_mask(field: np.ndarray, area: float) -> np.ndarray:
    """Soft indicator of the top `area` fraction of a smooth random field."""
    t = np.quantile(field, 1.0 - area)
    peak = field.max() - t + 1e-12
    return np.clip((field - t) / (0.18 * peak), 0.0, 1.0)


def digit_images(n: int, seed: int, side: int = 28, num_classes: int = 10,
                 shift: float = 2.0, base_area: float = 0.22,
                 class_area: float = 0.05, speckle: float = 0.35,
                 noise_amp: float = 0.03, proto_sigma: float = 1.6,
                 noise_sigma: float = 1.2) -> tuple[np.ndarray, np.ndarray]:
    """Digit-like surrogate: (uint8 images (n, side, side), labels (n,))."""
    if n % num_classes:
        raise ValueError("n must be a multiple of num_classes for balance")
    rng = np.random.default_rng(seed)
    smooth = lambda a, s: ndimage.gaussian_filter(a, sigma=s, mode="wrap")
    scaffold = _stroke_mask(smooth(rng.standard_normal((side, side)), proto_sigma),
                            base_area)
    protos = []
    for _c in range(num_classes):
        strokes = _stroke_mask(smooth(rng.standard_normal((side, side)), proto_sigma),
                               class_area)
        protos.append(np.maximum(scaffold * 0.95, strokes))
    labels = np.repeat(np.arange(num_classes), n // num_classes)
    rng.shuffle(labels)

    images = np.empty((n, side, side), dtype=np.uint8)
    for k in range(n):
        p = protos[labels[k]]
        dy, dx = rng.uniform(-shift, shift, size=2)
        img = ndimage.shift(p, (dy, dx), order=1, mode="wrap")
        # multiplicative stroke speckle: intra-class spread without
        # brightening the background (keeps images sparse)
        img = img * (1.0 + speckle * smooth(rng.standard_normal((side, side)), 2.0))
        img = img * rng.uniform(0.92, 1.0)
        img = img + noise_amp * smooth(rng.normal(size=(side, side)), noise_sigma)
        images[k] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def blob_points(n: int, seed: int, num_classes: int = 3, spread: float = 0.14,
                ) -> tuple[np.ndarray, np.ndarray]:
    """2-D Gaussian blobs on a circle, quantized to the uint8 pixel grid."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), -(-n // num_classes))[:n]
    rng.shuffle(labels)
    angles = 2.0 * np.pi * labels / num_classes
    centers = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = centers + spread * rng.normal(size=(n, 2))
    images = np.clip(np.round(pts * 255.0), 0, 255).astype(np.uint8)
    return images.reshape(n, 1, 2), labels.astype(np.int64)


def write_digit_dataset(images_path, labels_path, n: int, seed: int,
                        **kwargs) -> None:
    images, labels = digit_images(n, seed, **kwargs)
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)


def write_blob_dataset(images_path, labels_path, n: int, seed: int,
                       **kwargs) -> None:
    images, labels = blob_points(n, seed, **kwargs)
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
