"""Edge extraction for loss attention: Sobel magnitude, non-maximum
suppression and box-kernel edge spreading.

No hysteresis thresholding is applied; the edge strength after thinning is
used directly as a continuous map.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
BLUR_SIZE = 5
BLUR_SIGMA = 1.4


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA


def _gauss_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def pre_blur(gray: np.ndarray) -> np.ndarray:
    k = _gauss_kernel1d(BLUR_SIZE, BLUR_SIGMA)
    out = ndimage.correlate1d(gray, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def gradient_magnitude(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gradients with edge-replicated borders.

    Returns (magnitude, direction) where direction = atan2(gy, gx) in
    radians, x to the right and y down the rows.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"need a 2D image of at least 3x3, got shape {gray.shape}")
    p = np.pad(gray, 1, mode="edge")
    gx = (
        (p[:-2, 2:] - p[:-2, :-2])
        + 2.0 * (p[1:-1, 2:] - p[1:-1, :-2])
        + (p[2:, 2:] - p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] - p[:-2, :-2])
        + 2.0 * (p[2:, 1:-1] - p[:-2, 1:-1])
        + (p[2:, 2:] - p[:-2, 2:])
    )
    return np.hypot(gx, gy), np.arctan2(gy, gx)


# (row, col) offsets of the neighbor along each quantized gradient direction
_NEIGHBORS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def quantize_direction(direction: np.ndarray) -> np.ndarray:
    """Map angles to bins 0..3 for 0, 45, 90, 135 degrees."""
    deg = np.rad2deg(direction) % 180.0
    return (np.floor((deg + 22.5) / 45.0).astype(np.int64)) % 4


def non_max_suppression(magnitude: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Keep a pixel's magnitude iff it is >= both neighbors along its
    quantized gradient direction. Out-of-image neighbors count as zero."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.shape != np.shape(direction):
        raise ValueError("magnitude and direction shapes differ")
    h, w = magnitude.shape
    p = np.pad(magnitude, 1)
    bins = quantize_direction(direction)
    keep = np.zeros(magnitude.shape, dtype=bool)
    for b, (dr, dc) in _NEIGHBORS.items():
        fwd = p[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        bwd = p[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        keep |= (bins == b) & (magnitude >= fwd) & (magnitude >= bwd)
    return np.where(keep & (magnitude > 0), magnitude, 0.0)


def canny(image: np.ndarray, blur: bool = True) -> np.ndarray:
    """Thinned edge strength of an RGB or gray image."""
    gray = to_gray(image)
    if blur:
        gray = pre_blur(gray)
    mag, ang = gradient_magnitude(gray)
    return non_max_suppression(mag, ang)


def edge_enhance(edges: np.ndarray, radius: int) -> np.ndarray:
    """Spread edges with a normalized (2r+1)^2 box kernel, zero padded."""
    if radius < 0:
        raise ValueError("kernel radius must be >= 0")
    edges = np.asarray(edges, dtype=np.float64)
    if radius == 0:
        return edges.copy()
    return ndimage.uniform_filter(edges, size=2 * radius + 1, mode="constant", cval=0.0)


def enhanced_edges(image: np.ndarray, radius: int) -> np.ndarray:
    return edge_enhance(canny(image), radius)
