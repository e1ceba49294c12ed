"""Prompt-driven binarization of calligraphy photographs.

Otsu threshold -> 8-connected ink regions above ``min_area`` -> k-means
positive points per region plus uniformly drawn background points -> promptable
segmenter -> black ink on white -> longer side scaled to 256 -> centered on a
white 256x256 canvas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

INK = 0
PAPER = 255
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

Point = tuple[int, int]  # (x, y)


class SegmentationError(RuntimeError):
    pass


class NoRegionsError(ValueError):
    pass


def to_gray(image: np.ndarray) -> np.ndarray:
    """uint8 grayscale ``(h, w)`` from gray, RGB or RGBA input (ITU-R 601 luma)."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        elif arr.shape[-1] in (3, 4):
            rgb = arr[..., :3].astype(np.float64)
            arr = rgb @ np.array([0.299, 0.587, 0.114])
        else:
            raise ValueError(f"unsupported channel count {arr.shape[-1]}")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64)), 0, 255).astype(np.uint8)
    return arr


def between_class_variance(hist: np.ndarray) -> np.ndarray:
    """Otsu criterion for every threshold ``t`` (class 0 = intensities <= t)."""
    p = hist.astype(np.float64) / hist.sum()
    levels = np.arange(p.size, dtype=np.float64)
    w0 = np.cumsum(p)
    mu = np.cumsum(p * levels)
    mu_total = mu[-1]
    denom = w0 * (1.0 - w0)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (mu_total * w0 - mu) ** 2 / denom
    var[denom <= 0] = 0.0
    return var


def otsu_threshold(gray: np.ndarray) -> tuple[int, np.ndarray]:
    """Threshold and ink mask (``gray <= threshold``, the darker class).

    A constant image has no separation: the threshold is the constant and the
    mask is empty.
    """
    gray = to_gray(gray)
    lo, hi = int(gray.min()), int(gray.max())
    if lo == hi:
        return lo, np.zeros(gray.shape, dtype=bool)
    hist = np.bincount(gray.ravel(), minlength=256)
    threshold = int(np.argmax(between_class_variance(hist)))
    return threshold, gray <= threshold


@dataclass(frozen=True)
class Region:
    label: int
    pixels: np.ndarray  # (m, 2) rows of (y, x)

    @property
    def area(self) -> int:
        return int(self.pixels.shape[0])


def extract_regions(mask: np.ndarray, min_area: int = 100) -> list[Region]:
    """8-connected foreground components with area strictly greater than ``min_area``.

    Regions are ordered by their first pixel in raster order.
    """
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    ys, xs = np.nonzero(labels)
    ids = labels[ys, xs]
    order = np.argsort(ids, kind="stable")
    ids, ys, xs = ids[order], ys[order], xs[order]
    bounds = np.searchsorted(ids, np.arange(1, count + 2))
    regions = []
    for lab in range(1, count + 1):
        a, b = bounds[lab - 1], bounds[lab]
        if b - a > min_area:
            regions.append(Region(label=lab, pixels=np.stack([ys[a:b], xs[a:b]], axis=1)))
    return regions


def count_positive_points(region_area: int, image_area: int, max_points: int = 20) -> int:
    """``clamp(floor(region_area * 100 / image_area), 1, max_points)``."""
    if image_area <= 0:
        raise ValueError("image_area must be positive")
    return max(1, min(max_points, math.floor(region_area * 100 / image_area)))


def kmeans_centers(points: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 25) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns ``(k, 2)`` float centers."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(len(pts))]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(pts), p=d2 / total) if total > 0 else rng.integers(len(pts))
        centers[i] = pts[idx]
        d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(axis=1))
    for _ in range(iterations):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        moved = centers.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                moved[j] = members.mean(axis=0)
        if np.array_equal(moved, centers):
            break
        centers = moved
    return centers


@dataclass
class SegmenterPrompt:
    positives: list[Point] = field(default_factory=list)
    negatives: list[Point] = field(default_factory=list)


def sample_prompt_points(
    regions: Sequence[Region],
    image_shape: tuple[int, int],
    seed: int = 0,
    n_negative: int = 50,
    max_positive: int = 20,
    kmeans_iterations: int = 25,
) -> SegmenterPrompt:
    """Positive points at per-region k-means centers, negatives uniform over the background.

    Each region gets ``count_positive_points(region.area, h * w)`` centers, each
    snapped to the nearest pixel of that region.
    """
    if not regions:
        raise NoRegionsError("no connected regions above the area threshold; fall back to the Otsu mask")
    h, w = image_shape
    area = h * w
    rng = np.random.default_rng(seed)
    positives: list[Point] = []
    inside = np.zeros((h, w), dtype=bool)
    for region in regions:
        pix = region.pixels
        inside[pix[:, 0], pix[:, 1]] = True
        k = count_positive_points(region.area, area, max_positive)
        for center in kmeans_centers(pix, k, rng, kmeans_iterations):
            nearest = pix[((pix - center) ** 2).sum(axis=1).argmin()]
            positives.append((int(nearest[1]), int(nearest[0])))
    bg_y, bg_x = np.nonzero(~inside)
    take = min(n_negative, bg_y.size)
    chosen = rng.choice(bg_y.size, size=take, replace=False) if take else np.empty(0, dtype=int)
    negatives = [(int(bg_x[i]), int(bg_y[i])) for i in chosen]
    return SegmenterPrompt(positives=positives, negatives=negatives)


class Segmenter(Protocol):
    def __call__(self, image: np.ndarray, positives: Sequence[Point], negatives: Sequence[Point]) -> np.ndarray: ...


def otsu_fallback_segmenter(image: np.ndarray, positives: Sequence[Point], negatives: Sequence[Point]) -> np.ndarray:
    """Otsu ink restricted to the 8-connected components that contain a positive point."""
    _, ink = otsu_threshold(image)
    labels, _ = ndimage.label(ink, structure=EIGHT_CONNECTED)
    keep = {int(labels[y, x]) for x, y in positives} - {0}
    return np.isin(labels, sorted(keep))


def segment(image: np.ndarray, prompt: SegmenterPrompt, segmenter: Optional[Segmenter] = None) -> np.ndarray:
    segmenter = segmenter or otsu_fallback_segmenter
    try:
        mask = segmenter(image, prompt.positives, prompt.negatives)
    except Exception as exc:
        raise SegmentationError(
            f"segmenter {getattr(segmenter, '__name__', type(segmenter).__name__)} failed "
            f"with {len(prompt.positives)} positive / {len(prompt.negatives)} negative points: {exc}"
        ) from exc
    mask = np.asarray(mask)
    if mask.shape != np.asarray(image).shape[:2]:
        raise SegmentationError(f"segmenter returned mask of shape {mask.shape}, image is {np.asarray(image).shape[:2]}")
    return mask.astype(bool)


def fit_to_canvas(binary: np.ndarray, size: int = 256) -> np.ndarray:
    """Scale so the longer side equals ``size`` (nearest neighbour), re-threshold, center on white."""
    h, w = binary.shape
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = np.asarray(Image.fromarray(binary).resize((nw, nh), Image.NEAREST))
    resized = np.where(resized >= 128, PAPER, INK).astype(np.uint8)
    canvas = np.full((size, size), PAPER, dtype=np.uint8)
    top, left = (size - nh) // 2, (size - nw) // 2
    canvas[top:top + nh, left:left + nw] = resized
    return canvas


def binarize_and_normalize(
    image: np.ndarray,
    segmenter: Optional[Segmenter] = None,
    seed: int = 0,
    size: int = 256,
    min_area: int = 100,
    source: Optional[str] = None,
) -> np.ndarray:
    """Full pipeline; returns a ``size x size`` uint8 image with values in {0, 255}."""
    gray = to_gray(image)
    _, ink = otsu_threshold(gray)
    regions = extract_regions(ink, min_area)
    if regions:
        prompt = sample_prompt_points(regions, gray.shape, seed)
        seg_input = image if segmenter is not None else gray
        fg = segment(seg_input, prompt, segmenter)
    else:
        fg = ink
    if not fg.any():
        raise SegmentationError(f"{source or 'input image'}: segmentation produced an empty foreground")
    binary = np.where(fg, INK, PAPER).astype(np.uint8)
    return fit_to_canvas(binary, size)
