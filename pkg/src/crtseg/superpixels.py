"""Graph-based superpixel over-segmentation and pseudo-label sampling.

The segmenter follows the classic efficient graph-based scheme: Gaussian
pre-smoothing, an 8-connected pixel graph weighted by absolute intensity
difference, ascending edge merges gated by min(internal_i + k/|C_i|,
internal_j + k/|C_j|), then a cleanup pass folding components below
min_size into their nearest neighbor. Equal-weight edges are ordered by
their (pixel-index, pixel-index) pair so results are identical across
platforms and sort implementations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Image2D, MaskMap, write_raster
from .errors import NoEligibleSegment, ValidationError


@dataclass(frozen=True)
class SuperpixelMap:
    """Dense segment labeling with contiguous ids 0..K-1."""

    labels: np.ndarray
    n_segments: int
    sizes: np.ndarray

    @property
    def shape(self):
        return self.labels.shape


def _build_edges(smoothed: np.ndarray):
    """Flat-index endpoint arrays and weights for the 8-connected grid."""
    h, w = smoothed.shape
    idx = np.arange(h * w).reshape(h, w)
    flat = smoothed.ravel()
    pairs = []
    for du, dv in ((0, 1), (1, 0), (1, 1), (1, -1)):
        src = idx[max(0, -du) : h - max(0, du), max(0, -dv) : w - max(0, dv)].ravel()
        dst = idx[max(0, du) :, max(0, dv) :] if dv >= 0 else idx[du:, : w + dv]
        dst = dst.ravel()
        pairs.append((src, dst))
    a = np.concatenate([p[0] for p in pairs])
    b = np.concatenate([p[1] for p in pairs])
    # endpoints stored with a < b so the tie-break order is well defined
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    weights = np.abs(flat[lo] - flat[hi])
    return lo, hi, weights


def felzenszwalb_segment(
    image: Image2D, k: float, min_size: int, sigma: float
) -> SuperpixelMap:
    """Segment an image into superpixels of at least `min_size` pixels.

    Args:
        image: normalized input slice, intensities in [0, 1].
        k: merge-threshold scale; larger k yields fewer, larger segments.
        min_size: hard lower bound on output segment areas.
        sigma: Gaussian pre-smoothing width in pixels (0 disables).
    """
    if k <= 0:
        raise ValidationError(f"k must be positive, got {k}")
    if sigma < 0:
        raise ValidationError(f"sigma must be non-negative, got {sigma}")
    h, w = image.data.shape
    n = h * w
    if min_size < 1 or min_size > n:
        raise ValidationError(f"min_size {min_size} outside [1, {n}]")

    smoothed = gaussian_filter(image.data, sigma) if sigma > 0 else image.data
    lo, hi, weights = _build_edges(smoothed)
    order = np.lexsort((hi, lo, weights))
    lo_l = lo[order].tolist()
    hi_l = hi[order].tolist()
    w_l = weights[order].tolist()

    parent = list(range(n))
    size = [1] * n
    thresh = [k] * n  # internal(c) + k/|c|, with internal(singleton) = 0

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b, wt in zip(lo_l, hi_l, w_l):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if wt <= thresh[ra] and wt <= thresh[rb]:
            parent[rb] = ra
            size[ra] += size[rb]
            thresh[ra] = wt + k / size[ra]

    # fold undersized components into the neighbor across their cheapest edge
    for a, b, _wt in zip(lo_l, hi_l, w_l):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            parent[rb] = ra
            size[ra] += size[rb]

    labels = np.empty(n, dtype=np.int32)
    remap = {}
    for i in range(n):
        root = find(i)
        labels[i] = remap.setdefault(root, len(remap))
    labels = labels.reshape(h, w)
    sizes = np.bincount(labels.ravel(), minlength=len(remap))
    return SuperpixelMap(labels=labels, n_segments=len(remap), sizes=sizes)


def sample_pseudolabel(
    spx: SuperpixelMap, rng_seed: int, min_area: int, max_area_fraction: float
) -> MaskMap:
    """Pick one area-eligible segment uniformly at random as the foreground.

    Raises NoEligibleSegment when every segment falls outside
    [min_area, max_area_fraction * H * W]; callers resample another slice.
    """
    if min_area < 1:
        raise ValidationError(f"min_area must be positive, got {min_area}")
    if not 0 < max_area_fraction <= 1:
        raise ValidationError(
            f"max_area_fraction must be in (0, 1], got {max_area_fraction}"
        )
    h, w = spx.shape
    max_area = max_area_fraction * h * w
    eligible = np.flatnonzero((spx.sizes >= min_area) & (spx.sizes <= max_area))
    if eligible.size == 0:
        raise NoEligibleSegment(
            f"no segment with area in [{min_area}, {max_area:.0f}] "
            f"among {spx.n_segments} segments"
        )
    rng = np.random.default_rng(rng_seed)
    chosen = int(eligible[rng.integers(eligible.size)])
    return MaskMap((spx.labels == chosen).astype(np.int32))


def export_superpixels(spx: SuperpixelMap, out_prefix) -> tuple[Path, Path]:
    """Debug export: integer raster plus a color-coded PNG render."""
    from PIL import Image as PILImage

    out_prefix = Path(out_prefix)
    raster_path = out_prefix.with_suffix(".bin")
    write_raster(raster_path, spx.labels)

    # golden-ratio hue walk gives stable, well-separated segment colors
    ids = np.arange(max(spx.n_segments, 1))
    hue = (ids * 0.61803398875) % 1.0
    rgb = np.stack(
        [
            np.abs(hue * 6 - 3) - 1,
            2 - np.abs(hue * 6 - 2),
            2 - np.abs(hue * 6 - 4),
        ],
        axis=1,
    ).clip(0, 1)
    colored = (rgb[spx.labels] * 255).astype(np.uint8)
    png_path = out_prefix.with_suffix(".png")
    PILImage.fromarray(colored, mode="RGB").save(png_path)
    return raster_path, png_path
