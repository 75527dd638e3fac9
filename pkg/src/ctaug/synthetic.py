"""Synthetic stand-in datasets for smoke tests and desk-scale runs."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data_catalog import Label, SliceRecord, write_manifest
from .preprocess import save_image


def square(dim: int, rng: np.random.Generator) -> np.ndarray:
    side = int(rng.integers(dim // 4, dim // 2 + 1))
    top, left = rng.integers(0, dim - side + 1, size=2)
    img = np.zeros((dim, dim))
    img[top:top + side, left:left + side] = 1.0
    return img


def circle(dim: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(dim / 8, dim / 4)
    cy, cx = rng.uniform(r, dim - r, size=2)
    yy, xx = np.mgrid[0:dim, 0:dim]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)


def shapes_domains(n: int, dim: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` filled squares and ``n`` filled circles, values in {0, 1}."""
    rng = np.random.default_rng(seed)
    a = np.stack([square(dim, rng) for _ in range(n)])
    b = np.stack([circle(dim, rng) for _ in range(n)])
    return a, b


def fake_slice(label: Label, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Lung-ish blob; covid slices carry bright patchy opacities."""
    yy, xx = np.mgrid[0:dim, 0:dim] / dim
    img = 0.15 + 0.05 * rng.standard_normal((dim, dim))
    for cx in (0.3, 0.7):
        lung = ((xx - cx) / 0.18) ** 2 + ((yy - 0.5) / 0.32) ** 2 <= 1.0
        img[lung] = 0.05
    if label is Label.COVID:
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0.25, 0.75), rng.choice([0.3, 0.7]) + rng.uniform(-0.1, 0.1)
            r = rng.uniform(0.04, 0.09)
            img[((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r] = rng.uniform(0.6, 0.9)
    return np.clip(img + 0.02 * rng.standard_normal((dim, dim)), 0.0, 1.0)


def write_synthetic_dataset(root: str | os.PathLike, n_patients: int = 20, slices_per_patient: int = 10,
                            dim: int = 64, seed: int = 0) -> Path:
    """Write PNG slices plus ``manifest.csv``; half the patients are covid."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    records = []
    for p in range(n_patients):
        label = Label.COVID if p % 2 == 0 else Label.NORMAL
        pid = f"P{p:04d}"
        for s in range(slices_per_patient):
            rel = Path("images") / pid / f"{pid}_s{s:03d}.png"
            save_image(fake_slice(label, dim, rng), root / rel)
            records.append(SliceRecord(pid, str(rel), label))
    manifest = root / "manifest.csv"
    write_manifest(records, manifest)
    return manifest


def separable_images(n: int, dim: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two classes split by mean intensity: labels 0 darker, 1 brighter.

    Mean pixel value is a linear function of the image, so the classes are
    linearly separable.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 0.7, 0.3)[:, None, None]
    imgs = np.clip(base + 0.1 * rng.standard_normal((n, dim, dim)), 0.0, 1.0)
    return imgs, labels
