"""Handcrafted feature operators for the input-feature ablation.

Each operator maps an Image to a same-size single-channel feature map.
All of them send constant images to the all-zero map, which keeps the
ablation comparable: only structure, never the global level, enters the
feature channel. Defaults follow common literature settings: HOG cell 8
with 9 bins, Canny sigma 1.4 with thresholds 0.1/0.2, smoothed-gradient
sigma 2.0, Haar scale 8.

GRE here is the gradient magnitude of the Gaussian-smoothed image. The
acronym expands to Gaussian Radial Edges; with no published formula to
pin it down, this stand-in is the documented interpretation.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy import ndimage

from .imagecore import Image

HOG_CELL = 8
HOG_BINS = 9
# deliberately permissive: on speckled fan imagery the map traces blob
# boundaries as well as the target contour, like classical edge maps on
# real sonar
CANNY_SIGMA = 1.4
CANNY_LOW = 0.1
CANNY_HIGH = 0.2
GRE_SIGMA = 2.0
HAAR_SCALE = 8


class FeatureMapKind(enum.Enum):
    HOG = "hog"
    CANNY = "canny"
    GRE = "gre"
    HAAR = "haar"
    WST = "wst"


def hog_map(img: Image, cell: int = HOG_CELL, bins: int = HOG_BINS) -> Image:
    """Dominant-orientation energy map from per-cell gradient histograms.

    Central-difference gradients, unsigned orientations in [0, pi) with
    hard binning, magnitude-weighted cell histograms, L2 normalization
    over 2x2-cell blocks (each cell averages its normalized copies across
    the blocks containing it). The strongest normalized bin of each cell
    is painted over that cell's pixels, so the output lives in [0, 1].
    """
    h, w = img.shape
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if cell < 1 or cell > h or cell > w:
        raise ValueError(f"cell {cell} larger than image {h}x{w}")
    if h % cell or w % cell:
        raise ValueError(f"cell {cell} must divide image dims {h}x{w}")

    gy, gx = np.gradient(img.pixels)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((ang / np.pi * bins).astype(np.int64), bins - 1)

    ncy, ncx = h // cell, w // cell
    cell_of = (np.arange(h)[:, None] // cell) * ncx + (np.arange(w)[None, :] // cell)
    flat = (cell_of * bins + idx).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=ncy * ncx * bins)
    hist = hist.reshape(ncy, ncx, bins)

    norm = _block_normalize(hist)
    energy = norm.max(axis=2)
    return Image(np.repeat(np.repeat(energy, cell, axis=0), cell, axis=1))


def _block_normalize(hist: np.ndarray) -> np.ndarray:
    """L2 normalization over 2x2-cell blocks, averaged per cell."""
    ncy, ncx, _ = hist.shape
    eps = 1e-12
    if ncy < 2 or ncx < 2:
        # grid too small for 2x2 blocks: normalize over the whole grid
        return hist / (np.sqrt((hist**2).sum()) + eps)
    acc = np.zeros_like(hist)
    cnt = np.zeros((ncy, ncx, 1))
    for by in range(ncy - 1):
        for bx in range(ncx - 1):
            block = hist[by : by + 2, bx : bx + 2]
            n = np.sqrt((block**2).sum()) + eps
            acc[by : by + 2, bx : bx + 2] += block / n
            cnt[by : by + 2, bx : bx + 2] += 1.0
    return acc / cnt


_NMS_DIRS = (
    (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1),
)


def canny_map(
    img: Image,
    sigma: float = CANNY_SIGMA,
    low: float = CANNY_LOW,
    high: float = CANNY_HIGH,
) -> Image:
    """Binary Canny edge map.

    Gaussian smoothing, Sobel gradients, non-maximum suppression along the
    quantized gradient direction, then double-threshold hysteresis. low and
    high are fractions of the maximum gradient magnitude; both thresholds
    are strict, so a flat image yields no edges.
    """
    if not (0.0 < low < high < 1.0):
        raise ValueError(f"need 0 < low < high < 1, got {low}, {high}")
    smooth = ndimage.gaussian_filter(img.pixels, sigma, mode="reflect")
    gx = ndimage.sobel(smooth, axis=1, mode="reflect")
    gy = ndimage.sobel(smooth, axis=0, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()

    h, w = mag.shape
    ang = np.arctan2(gy, gx)
    dir8 = np.round(ang / (np.pi / 4)).astype(np.int64) % 8
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = mag
    keep = np.zeros((h, w), dtype=bool)
    for d, (dx, dy) in enumerate(_NMS_DIRS):
        sel = dir8 == d
        nxt = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        prv = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # asymmetric tie-break: a plateau of equal magnitudes keeps only
        # its first pixel along the gradient direction
        keep |= sel & (mag > prv) & (mag >= nxt)
    nms = np.where(keep, mag, 0.0)

    strong = nms > high * peak
    weak = nms > low * peak
    if not strong.any():
        return Image(np.zeros((h, w)))
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    hit = np.unique(labels[strong])
    out = weak & np.isin(labels, hit[hit > 0])
    return Image(out.astype(np.float64))


def gre_map(img: Image, sigma: float = GRE_SIGMA) -> Image:
    """Gradient magnitude of the Gaussian-smoothed image."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    smooth = ndimage.gaussian_filter(img.pixels, sigma, mode="reflect")
    gy, gx = np.gradient(smooth)
    return Image(np.hypot(gx, gy))


def _integral_image(arr: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero top row / left column."""
    ii = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1))
    ii[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    return ii


def _rect_sum(ii: np.ndarray, y0, y1, x0, x1):
    """Sum of arr[y0:y1, x0:x1] from a summed-area table."""
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def haar_map(img: Image, scale: int = HAAR_SCALE) -> Image:
    """Two-rectangle Haar response magnitude at a single scale.

    For each pixel, the scale x scale window [y-s/2, y+s/2) x [x-s/2, x+s/2)
    is split into halves; the response is the larger of the two absolute
    mean differences (left/right halves and top/bottom halves). Rectangle
    sums come from an integral image over a symmetric-padded copy. The
    global level is subtracted first, so it cancels exactly.
    """
    h, w = img.shape
    if scale < 2 or scale % 2:
        raise ValueError(f"scale must be even and >= 2, got {scale}")
    if scale > h or scale > w:
        raise ValueError(f"scale {scale} exceeds image dims {h}x{w}")
    half = scale // 2
    centered = img.pixels - img.pixels.mean()
    padded = np.pad(centered, half, mode="symmetric")
    ii = _integral_image(padded)
    area = float(half * scale)

    ys = np.arange(h)[:, None] + half  # window center in padded coords
    xs = np.arange(w)[None, :] + half
    left = _rect_sum(ii, ys - half, ys + half, xs - half, xs)
    right = _rect_sum(ii, ys - half, ys + half, xs, xs + half)
    top = _rect_sum(ii, ys - half, ys, xs - half, xs + half)
    bottom = _rect_sum(ii, ys, ys + half, xs - half, xs + half)
    rh = np.abs(right - left) / area
    rv = np.abs(bottom - top) / area
    return Image(np.maximum(rh, rv))


def feature_map(img: Image, kind: FeatureMapKind) -> Image:
    """Apply one handcrafted operator with its default parameters."""
    if kind == FeatureMapKind.HOG:
        return hog_map(img)
    if kind == FeatureMapKind.CANNY:
        return canny_map(img)
    if kind == FeatureMapKind.GRE:
        return gre_map(img)
    if kind == FeatureMapKind.HAAR:
        return haar_map(img)
    raise ValueError(f"{kind} is not a handcrafted map (WST uses the bridge)")
