"""Gaussian filtering, presizing and training-time augmentation of CT slices.

Images are plain float64 numpy arrays: ``(H, W)`` for grayscale slices in
[0, 1], ``(3, H, W)`` once replicated for a backbone.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = 1.0
    kernel_radius: int = 2

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.kernel_radius) < 1:
            raise ValueError(f"kernel_radius must be >= 1, got {self.kernel_radius}")


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    max_rotate_deg: float = 10.0
    zoom_range: tuple[float, float] = (1.0, 1.1)
    warp_magnitude: float = 0.2
    lighting_range: tuple[float, float] = (0.8, 1.2)
    presize_dim: int = 256
    final_dim: int = 224

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(self.zoom_range))
        object.__setattr__(self, "lighting_range", tuple(self.lighting_range))
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        lo, hi = self.zoom_range
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"zoom_range must satisfy 0 < lo <= 1 <= hi, got {self.zoom_range}")
        llo, lhi = self.lighting_range
        if not 0 < llo <= 1 <= lhi:
            raise ValueError(f"lighting_range must satisfy 0 < lo <= 1 <= hi, got {self.lighting_range}")
        if self.max_rotate_deg < 0 or self.warp_magnitude < 0:
            raise ValueError("rotation and warp magnitudes must be non-negative")
        if self.final_dim > self.presize_dim:
            raise ValueError("final_dim must not exceed presize_dim")

    @classmethod
    def identity(cls, presize_dim: int = 256, final_dim: int = 224) -> "AugmentPolicy":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, (1.0, 1.0), presize_dim, final_dim)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or img.shape[-1] < 1 or img.shape[-2] < 1:
        raise DataError(f"expected a (H, W) or (C, H, W) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    return img


# -- loading / saving ---------------------------------------------------------

def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load PNG/JPEG as grayscale float64 in [0, 1] (RGB is converted to luma)."""
    try:
        with PILImage.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return np.clip(arr / 65535.0, 0.0, 1.0)
            if im.mode == "F":
                return np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] grayscale image as 16-bit PNG."""
    img = check_image(img)
    if img.ndim == 3:
        img = img.mean(axis=0)
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(q).save(path)


# -- Gaussian filter ------------------------------------------------------------

def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    # x + sum_j w_j (x_j - x) equals sum_j w_j x_j for a unit-sum kernel and
    # keeps constant regions bit-exact
    delta = np.zeros_like(img)
    for j, w in enumerate(kernel):
        delta += w * (np.take(padded, np.arange(j, j + n), axis=axis) - img)
    return img + delta


def gaussian_filter(img: np.ndarray, spec: GaussianSpec) -> np.ndarray:
    """Separable Gaussian blur with reflect (edge-repeating) borders.

    Operates on the last two axes so 3-channel images blur per channel.
    """
    img = check_image(img)
    k = gaussian_kernel(spec.sigma, spec.kernel_radius)
    return _convolve_axis(_convolve_axis(img, k, img.ndim - 2), k, img.ndim - 1)


# -- resizing -----------------------------------------------------------------

def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    img = check_image(img)
    if img.shape[-2:] == (height, width):
        return img.copy()
    if img.ndim == 3:
        return np.stack([resize_bilinear(c, height, width) for c in img])
    out = PILImage.fromarray(img.astype(np.float32)).resize((width, height), PILImage.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def presize_shape(height: int, width: int, presize_dim: int) -> tuple[int, int]:
    scale = presize_dim / min(height, width)
    if height <= width:
        return presize_dim, max(presize_dim, int(round(width * scale)))
    return max(presize_dim, int(round(height * scale))), presize_dim


def presize_and_crop(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator | None = None) -> np.ndarray:
    """Resize so the short side is ``presize_dim`` then crop ``final_dim`` square.

    Center crop when ``rng`` is None (evaluation), random crop otherwise.
    """
    img = check_image(img)
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise DataError(f"image too small to presize: {h}x{w}")
    ph, pw = presize_shape(h, w, policy.presize_dim)
    img = resize_bilinear(img, ph, pw)
    d = policy.final_dim
    if rng is None:
        top, left = (ph - d) // 2, (pw - d) // 2
    else:
        top = int(rng.integers(0, ph - d + 1))
        left = int(rng.integers(0, pw - d + 1))
    return img[..., top:top + d, left:left + d].copy()


# -- augmentation -------------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def _perspective_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping the four ``src`` points onto ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _warp(img: np.ndarray, out_to_in: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    src = out_to_in @ pts
    sx = (src[0] / src[2]).reshape(h, w)
    sy = (src[1] / src[2]).reshape(h, w)

    def sample(plane):
        return ndimage.map_coordinates(plane, [sy, sx], order=1, mode="reflect")

    if img.ndim == 3:
        return np.stack([sample(c) for c in img])
    return sample(img)


def augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random flip, rotation, zoom, perspective warp and lighting.

    Every call consumes the same number of draws from ``rng`` regardless of
    the policy, so a seed fixes the whole stream.
    """
    img = check_image(img)
    h, w = img.shape[-2:]
    u = rng.random(12)
    flip = u[0] < policy.flip_prob
    angle = math.radians((2 * u[1] - 1) * policy.max_rotate_deg)
    zlo, zhi = policy.zoom_range
    zoom = zlo + (zhi - zlo) * u[2]
    jitter = (2 * u[3:11] - 1).reshape(4, 2) * policy.warp_magnitude * np.array([w, h]) / 2
    llo, lhi = policy.lighting_range
    contrast = llo + (lhi - llo) * u[11]
    brightness = llo + (lhi - llo) * rng.random()

    out = hflip(img) if flip else img.copy()

    # output pixel -> input pixel: undo zoom and rotation about the centre,
    # after the perspective jitter on the corners
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = math.cos(angle), math.sin(angle)
    center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    uncenter = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    rot_zoom_inv = np.array([[c, s, 0], [-s, c, 0], [0, 0, zoom]], dtype=np.float64) / zoom
    rot_zoom_inv[2, 2] = 1.0
    affine_inv = center @ rot_zoom_inv @ uncenter
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    if np.any(jitter) and h > 1 and w > 1:
        warp_inv = _perspective_from_corners(corners, corners + jitter)
    else:
        warp_inv = np.eye(3)
    out_to_in = affine_inv @ warp_inv
    if not np.allclose(out_to_in, np.eye(3), rtol=0, atol=1e-12):
        out = _warp(out, out_to_in)

    if contrast != 1.0 or brightness != 1.0:
        out = ((out - 0.5) * contrast + 0.5) * brightness
    return np.clip(out, 0.0, 1.0)


def to_model_tensor(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    img = check_image(img)
    if img.ndim != 2:
        raise DataError(f"expected a single-channel image, got shape {img.shape}")
    mean = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    if np.any(std == 0):
        raise ValueError("std must be non-zero")
    return (np.broadcast_to(img, (3,) + img.shape) - mean) / std


# -- ingestion cache ----------------------------------------------------------

def cache_key(source_path: str, spec: GaussianSpec) -> str:
    blob = json.dumps({"path": os.path.abspath(source_path), "gaussian": asdict(spec)}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def cached_filtered(source_path: str, spec: GaussianSpec, cache_dir: str | os.PathLike) -> Path:
    """Gaussian-filter ``source_path`` once and return the cached PNG path."""
    target = Path(cache_dir) / f"{cache_key(source_path, spec)}.png"
    if not target.exists():
        img = gaussian_filter(load_image(source_path), spec)
        tmp = target.with_suffix(".tmp.png")
        save_image(img, tmp)
        os.replace(tmp, target)
    return target
