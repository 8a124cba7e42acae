# src/conditioning.py
"""
Edge-map conditioning for the diffusion backend (Canny).

Gradient magnitudes are divided by 4*sqrt(2), the Sobel bound for an image in
[0, 1], so thresholds live in (0, 1] regardless of image content.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from src.errors import BadThresholds, DecodeError
from src.images import ImageLike, as_array, save_png, to_png_bytes

REC601 = np.array([0.299, 0.587, 0.114])
SOBEL_NORM = 4.0 * math.sqrt(2.0)

DEFAULT_LOW = 0.1
DEFAULT_HIGH = 0.2
DEFAULT_SIGMA = 1.4

# 8-connectivity for hysteresis
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class EdgeMap:
    width: int
    height: int
    pixels: np.ndarray  # bool, H×W, True = edge

    @property
    def edge_count(self) -> int:
        return int(self.pixels.sum())

    def to_png_bytes(self) -> bytes:
        return to_png_bytes(self.pixels.astype(bool))

    def save(self, path: str | Path) -> Path:
        return save_png(self.pixels.astype(bool), path)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EdgeMap):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


def to_grayscale(image: ImageLike) -> np.ndarray:
    """H×W luminance in [0, 1] using Rec. 601 weights."""
    array = as_array(image)
    if array.size == 0:
        raise DecodeError("image is empty")

    if np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        scale = 255.0 if array.dtype != bool else 1.0
        array = array.astype(np.float64) / scale
    else:
        array = array.astype(np.float64)

    if array.ndim == 2:
        return array
    if array.ndim == 3 and array.shape[2] == 1:
        return array[:, :, 0]
    if array.ndim == 3 and array.shape[2] in (3, 4):
        gray = array[:, :, :3] @ REC601
        return np.clip(gray, 0.0, 1.0)
    raise DecodeError(f"cannot interpret image of shape {array.shape}")


def _non_max_suppression(magnitude: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels not smaller than both neighbours along the gradient (ties kept)."""
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(magnitude, 1, mode="constant")
    h, w = magnitude.shape

    def shifted(dr: int, dc: int) -> np.ndarray:
        return padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]

    # rows grow downwards, so a 45° gradient points to (row+1, col+1)
    horizontal = (angle < 22.5) | (angle >= 157.5)
    diag_down = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    diag_up = (angle >= 112.5) & (angle < 157.5)

    n1 = np.zeros_like(magnitude)
    n2 = np.zeros_like(magnitude)
    for mask, (a, b) in (
        (horizontal, ((0, -1), (0, 1))),
        (diag_down, ((-1, -1), (1, 1))),
        (vertical, ((-1, 0), (1, 0))),
        (diag_up, ((-1, 1), (1, -1))),
    ):
        n1 = np.where(mask, shifted(*a), n1)
        n2 = np.where(mask, shifted(*b), n2)

    keep = (magnitude >= n1) & (magnitude >= n2)
    return np.where(keep, magnitude, 0.0)


def canny(
    image: ImageLike,
    low_threshold: float = DEFAULT_LOW,
    high_threshold: float = DEFAULT_HIGH,
    blur_sigma: float = DEFAULT_SIGMA,
) -> EdgeMap:
    """
    Gaussian blur, Sobel gradients, 4-direction non-maximum suppression and
    double-threshold hysteresis. The outermost 1-pixel frame is never an edge.
    """
    if not 0.0 < low_threshold < high_threshold <= 1.0:
        raise BadThresholds(
            f"need 0 < low < high <= 1, got low={low_threshold}, high={high_threshold}"
        )
    if blur_sigma < 0:
        raise BadThresholds(f"blur_sigma must be >= 0, got {blur_sigma}")

    gray = to_grayscale(image)
    height, width = gray.shape

    if blur_sigma > 0:
        gray = ndimage.gaussian_filter(gray, sigma=blur_sigma, mode="nearest")

    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    magnitude = np.hypot(gx, gy) / SOBEL_NORM

    thin = _non_max_suppression(magnitude, gx, gy)
    thin[0, :] = thin[-1, :] = 0.0
    thin[:, 0] = thin[:, -1] = 0.0

    strong = thin >= high_threshold
    weak = thin >= low_threshold
    labels, count = ndimage.label(weak, structure=_EIGHT)
    if count:
        keep = np.zeros(count + 1, dtype=bool)
        keep[np.unique(labels[strong])] = True
        keep[0] = False
        edges = keep[labels]
    else:
        edges = np.zeros_like(weak)

    return EdgeMap(width=width, height=height, pixels=edges)
