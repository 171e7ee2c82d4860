"""Tumor-region segmentation and size estimation.

The chain is deliberately classical: luma grayscale, a histogram
threshold, 4-connected components, then the largest region is taken as
the affected area.  It feeds the report with a pixel count, a bounding
box, a centroid, and a yellow-highlighted overlay image.

Images here are 8-bit: RGB arrays are (H, W, 3) uint8 and grayscale
arrays are (H, W) uint8.  rgb_from_unit converts from the (3, H, W)
float images the model side uses.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, EmptyInputError, InputError

__all__ = [
    "SegmentationResult", "rgb_from_unit", "to_grayscale", "otsu_threshold",
    "threshold_mask", "connected_components", "estimate_size",
    "highlight_yellow", "segment",
]

YELLOW = (255, 255, 0)


@dataclass(frozen=True)
class SegmentationResult:
    """Size estimate for the selected region plus the overlay image.

    found is False when the mask had no region at all; bbox, centroid
    and area_mm2 are then None and area_px is 0.  bbox is inclusive:
    (row0, col0, row1, col1).
    """

    found: bool
    area_px: int
    area_mm2: float | None
    bbox: tuple[int, int, int, int] | None
    centroid: tuple[float, float] | None
    highlighted: np.ndarray | None = None


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round goes to even; intensity arithmetic rounds half away from zero
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _as_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got {list(arr.shape)}")
    if arr.size == 0:
        raise EmptyInputError("empty image")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"expected 8-bit integers, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() > 255:
        raise InputError("channel values must lie in [0, 255]")
    return arr.astype(np.uint8)


def _as_gray(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DimensionError(f"expected an HxW image, got {list(arr.shape)}")
    if arr.size == 0:
        raise EmptyInputError("empty image")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"expected 8-bit integers, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() > 255:
        raise InputError("intensities must lie in [0, 255]")
    return arr.astype(np.uint8)


def rgb_from_unit(image) -> np.ndarray:
    """Convert a (3, H, W) float image in [0, 1] to (H, W, 3) uint8."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a 3xHxW image, got {list(arr.shape)}")
    if arr.size == 0:
        raise EmptyInputError("empty image")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("unit-range image expected")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def to_grayscale(rgb) -> np.ndarray:
    """Luma conversion: Y = round(0.299 R + 0.587 G + 0.114 B)."""
    arr = _as_rgb(rgb).astype(np.float64)
    y = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    return np.clip(_round_half_away(y), 0, 255).astype(np.uint8)


def otsu_threshold(gray) -> int:
    """Histogram threshold maximizing between-class variance.

    Classes are {intensity < t} and {intensity >= t} over candidate
    levels t in [0, 255]; scores are compared in exact integer
    arithmetic and ties go to the lower level.  A constant image is
    degenerate: its single value is returned, which leaves the
    strictly-greater mask empty.
    """
    arr = _as_gray(gray)
    lo, hi = int(arr.min()), int(arr.max())
    if lo == hi:
        return lo
    hist = np.bincount(arr.ravel(), minlength=256)
    total = int(arr.size)
    total_sum = int(np.dot(np.arange(256, dtype=np.int64), hist))
    best_t, best_num, best_den = 0, -1, 1
    n0 = 0
    s0 = 0
    for t in range(256):
        if t > 0:
            n0 += int(hist[t - 1])
            s0 += (t - 1) * int(hist[t - 1])
        n1 = total - n0
        s1 = total_sum - s0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            # between-class variance is (s0*n1 - s1*n0)^2 / (n0*n1*total^2);
            # the total^2 factor is common, so it drops out of comparisons
            d = s0 * n1 - s1 * n0
            num, den = d * d, n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def threshold_mask(gray, level: int) -> np.ndarray:
    """Boolean mask of pixels strictly brighter than level."""
    arr = _as_gray(gray)
    if not 0 <= int(level) <= 255:
        raise InputError(f"threshold level {level} outside [0, 255]")
    return arr > int(level)


def connected_components(mask) -> tuple[np.ndarray, list[int]]:
    """Label 4-connected regions of a boolean mask.

    Returns (labels, areas): labels is an int array with background 0
    and regions numbered densely from 1 in scan order; areas[i] is the
    pixel count of label i + 1.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"expected an HxW mask, got {list(arr.shape)}")
    if arr.dtype != bool:
        raise InputError(f"expected a boolean mask, got dtype {arr.dtype}")
    h, w = arr.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]  # union-find over provisional labels, index 0 unused

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for r in range(h):
        for c in range(w):
            if not arr[r, c]:
                continue
            up = int(labels[r - 1, c]) if r else 0
            left = int(labels[r, c - 1]) if c else 0
            if not up and not left:
                parent.append(len(parent))
                labels[r, c] = len(parent) - 1
            elif up and left:
                ru, rl = find(up), find(left)
                labels[r, c] = min(ru, rl)
                parent[max(ru, rl)] = min(ru, rl)
            else:
                labels[r, c] = find(up or left)
    dense: dict[int, int] = {}
    areas: list[int] = []
    for r in range(h):
        for c in range(w):
            if not arr[r, c]:
                continue
            root = find(int(labels[r, c]))
            if root not in dense:
                dense[root] = len(dense) + 1
                areas.append(0)
            labels[r, c] = dense[root]
            areas[dense[root] - 1] += 1
    return labels, areas


def _largest_label(areas: list[int]) -> int:
    # max area, ties to the smallest label
    return areas.index(max(areas)) + 1


def estimate_size(regions, pixel_spacing_mm: float | None = None) -> SegmentationResult:
    """Measure the largest labeled region (ties go to the smallest label).

    regions is the (labels, areas) pair from connected_components.
    area_mm2 is area_px * spacing^2 and only present when a spacing is
    given.  An empty labeling yields found=False with zero area.
    """
    labels, areas = regions
    if pixel_spacing_mm is not None and pixel_spacing_mm <= 0:
        raise InputError(f"pixel spacing must be positive, got {pixel_spacing_mm}")
    if not areas:
        return SegmentationResult(
            found=False, area_px=0, area_mm2=None, bbox=None, centroid=None
        )
    best = _largest_label(areas)
    rows, cols = np.nonzero(labels == best)
    bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    centroid = (float(rows.mean()), float(cols.mean()))
    area_px = int(areas[best - 1])
    area_mm2 = None
    if pixel_spacing_mm is not None:
        area_mm2 = area_px * float(pixel_spacing_mm) ** 2
    return SegmentationResult(
        found=True, area_px=area_px, area_mm2=area_mm2, bbox=bbox, centroid=centroid
    )


def highlight_yellow(rgb, mask, alpha: float = 0.5) -> np.ndarray:
    """Blend masked pixels toward pure yellow; unmasked pixels pass through."""
    image = _as_rgb(rgb)
    sel = np.asarray(mask)
    if sel.shape != image.shape[:2]:
        raise InputError(
            f"mask extents {list(sel.shape)} do not match image {list(image.shape[:2])}"
        )
    if sel.dtype != bool:
        raise InputError(f"expected a boolean mask, got dtype {sel.dtype}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha {alpha} outside [0, 1]")
    out = image.copy()
    blend = (1.0 - alpha) * image[sel].astype(np.float64) + alpha * np.asarray(
        YELLOW, dtype=np.float64
    )
    out[sel] = _round_half_away(blend).astype(np.uint8)
    return out


def segment(rgb, pixel_spacing_mm: float | None = None, alpha: float = 0.5) -> SegmentationResult:
    """Full chain on an RGB image; highlights the selected region only."""
    image = _as_rgb(rgb)
    gray = to_grayscale(image)
    level = otsu_threshold(gray)
    mask = threshold_mask(gray, level)
    labels, areas = connected_components(mask)
    result = estimate_size((labels, areas), pixel_spacing_mm)
    if result.found:
        overlay = highlight_yellow(image, labels == _largest_label(areas), alpha)
    else:
        overlay = image.copy()
    return replace(result, highlighted=overlay)
