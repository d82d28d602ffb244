"""Deterministic region growing over RGB images.

Growth proceeds in waves of 4-connected neighbors. A candidate pixel joins
the region when the L2 distance (across channels, 0-255 scale) between its
color and the running region mean is at most the threshold; the mean is
recomputed after every wave. Wave order and within-wave acceptance are both
deterministic, so identical inputs always give identical masks.
"""

from __future__ import annotations

import numpy as np

DEFAULT_THRESHOLD = 30.0


def grow_region(image: np.ndarray, seed: tuple[int, int], threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean mask of the region grown from ``seed`` (x, y)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    x, y = int(seed[0]), int(seed[1])
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"seed ({x}, {y}) outside image {w}x{h}")
    region = np.zeros((h, w), dtype=bool)
    region[y, x] = True
    frontier = region.copy()
    color_sum = img[y, x].copy()
    count = 1
    while True:
        cand = np.zeros_like(region)
        cand[1:, :] |= frontier[:-1, :]
        cand[:-1, :] |= frontier[1:, :]
        cand[:, 1:] |= frontier[:, :-1]
        cand[:, :-1] |= frontier[:, 1:]
        cand &= ~region
        ys, xs = np.nonzero(cand)
        if len(ys) == 0:
            return region
        mean = color_sum / count
        dist = np.sqrt(((img[ys, xs] - mean) ** 2).sum(axis=1))
        keep = dist <= threshold
        if not keep.any():
            return region
        ys, xs = ys[keep], xs[keep]
        region[ys, xs] = True
        frontier = np.zeros_like(region)
        frontier[ys, xs] = True
        color_sum += img[ys, xs].sum(axis=0)
        count += len(ys)


def segment(image: np.ndarray, prompts, threshold: float = DEFAULT_THRESHOLD) -> tuple[np.ndarray, float]:
    """Mask and confidence from point prompts.

    Positive prompts each grow a region; negative prompts grow regions that
    are carved out of the union. Confidence is the color contrast across the
    final mask boundary, scaled to [0, 1].
    """
    img = np.asarray(image)
    mask = np.zeros(img.shape[:2], dtype=bool)
    for p in prompts:
        if p["positive"]:
            mask |= grow_region(img, (p["x"], p["y"]), threshold)
    for p in prompts:
        if not p["positive"]:
            mask &= ~grow_region(img, (p["x"], p["y"]), threshold)
    return mask, boundary_contrast(img, mask, threshold)


def boundary_contrast(image: np.ndarray, mask: np.ndarray, threshold: float) -> float:
    """Mean L2 color distance between the region mean and the pixels just
    outside the mask boundary, scaled by twice the growth threshold and
    clipped to [0, 1]. An empty or borderless mask scores 0."""
    if not mask.any():
        return 0.0
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    ring = np.zeros_like(mask)
    ring[1:, :] |= mask[:-1, :]
    ring[:-1, :] |= mask[1:, :]
    ring[:, 1:] |= mask[:, :-1]
    ring[:, :-1] |= mask[:, 1:]
    ring &= ~mask
    if not ring.any():
        return 0.0
    mean = img[mask].mean(axis=0)
    dist = np.sqrt(((img[ring] - mean) ** 2).sum(axis=1))
    return float(np.clip(dist.mean() / (2.0 * threshold), 0.0, 1.0))
