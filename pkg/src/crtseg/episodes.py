"""Support-query episode assembly for training and evaluation.

A training episode takes one slice, samples a superpixel as the pseudo-label
foreground, keeps the original slice as the support, and manufactures the
query by warping the support with a random affine and gamma shift. Evaluation
episodes pair two labeled slices on a shared class, untransformed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Image2D,
    MaskMap,
    TransformParams,
    TransformRanges,
    apply_affine,
    apply_gamma,
    identity_params,
    make_affine,
    read_raster,
    write_raster,
)
from .errors import LoadError, ValidationError
from .superpixels import SuperpixelMap, felzenszwalb_segment, sample_pseudolabel


@dataclass(frozen=True)
class SuperpixelConfig:
    """Segmentation and pseudo-label eligibility settings (all config keys)."""

    k: float = 0.05
    min_size: int = 48
    sigma: float = 0.8
    min_area: int = 100
    max_area_fraction: float = 0.5


@dataclass(frozen=True)
class Episode:
    """One support-query pair for a single foreground class.

    1-way-1-shot only: a single support exemplar defines class 1 against
    background 0. Both masks are binary.
    """

    support_image: Image2D
    support_mask: MaskMap
    query_image: Image2D
    query_mask: MaskMap
    params: TransformParams
    episode_seed: int
    class_id: int = 1

    def __post_init__(self):
        for mask in (self.support_mask, self.query_mask):
            if not np.all((mask.data == 0) | (mask.data == 1)):
                raise ValidationError("episode masks must be binary")


def sample_transform_params(
    ranges: TransformRanges, rng: np.random.Generator, shape, seed: int = 0
) -> TransformParams:
    """Draw affine + gamma parameters; rotation/scale/shear act about center."""
    rotation = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
    scale = rng.uniform(*ranges.scale)
    shear = rng.uniform(-ranges.shear_deg, ranges.shear_deg)
    translate = (
        rng.uniform(-ranges.translate_px, ranges.translate_px),
        rng.uniform(-ranges.translate_px, ranges.translate_px),
    )
    gamma = rng.uniform(*ranges.gamma)
    center = ((shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0)
    affine = make_affine(rotation, scale, shear, translate, center)
    return TransformParams(affine=affine, gamma=gamma, seed=seed)


def build_episode(
    slice_image: Image2D,
    spx_config: SuperpixelConfig,
    transform_ranges: TransformRanges,
    episode_seed: int,
    spx: SuperpixelMap | None = None,
) -> Episode:
    """Assemble a self-supervised training episode from one slice.

    Pure in (slice, configs, episode_seed). A precomputed SuperpixelMap for
    the slice may be passed to amortize segmentation across episodes; it must
    match felzenszwalb_segment(slice, ...) for the same config.

    Raises NoEligibleSegment when no superpixel passes the area gate.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, episode_seed]))
    pseudolabel_seed = int(rng.integers(2**62))
    if spx is None:
        spx = felzenszwalb_segment(
            slice_image, spx_config.k, spx_config.min_size, spx_config.sigma
        )
    support_mask = sample_pseudolabel(
        spx, pseudolabel_seed, spx_config.min_area, spx_config.max_area_fraction
    )
    params = sample_transform_params(
        transform_ranges, rng, slice_image.data.shape, seed=episode_seed
    )
    query_image = apply_gamma(apply_affine(slice_image, params, "bilinear"), params.gamma)
    query_mask = apply_affine(support_mask, params, "nearest")
    return Episode(
        support_image=slice_image,
        support_mask=support_mask,
        query_image=query_image,
        query_mask=query_mask,
        params=params,
        episode_seed=episode_seed,
    )


def build_eval_episode(
    support: tuple[Image2D, MaskMap],
    query: tuple[Image2D, MaskMap],
    class_id: int,
) -> Episode:
    """Pair two labeled slices into an untransformed evaluation episode.

    Masks are binarized on class_id. The class must appear in the support
    mask; an empty query foreground is allowed (scored by Dice as-is).
    """
    support_image, support_mask = support
    query_image, query_mask = query
    if not np.any(support_mask.data == class_id):
        raise ValidationError(f"class {class_id} absent from support mask")
    return Episode(
        support_image=support_image,
        support_mask=support_mask.binarize(class_id),
        query_image=query_image,
        query_mask=query_mask.binarize(class_id),
        params=identity_params(),
        episode_seed=0,
        class_id=class_id,
    )


# ---------------------------------------------------------------------------
# Episode archives (binary rasters + JSON manifest, replayable)
# ---------------------------------------------------------------------------


def save_episode_archive(episodes: list[Episode], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        stem = f"ep{i:04d}"
        write_raster(out / f"{stem}_simg.bin", ep.support_image.data.astype(np.float32))
        write_raster(out / f"{stem}_smsk.bin", ep.support_mask.data)
        write_raster(out / f"{stem}_qimg.bin", ep.query_image.data.astype(np.float32))
        write_raster(out / f"{stem}_qmsk.bin", ep.query_mask.data)
        entries.append(
            {
                "stem": stem,
                "episode_seed": ep.episode_seed,
                "class_id": ep.class_id,
                "gamma": ep.params.gamma,
                "affine": [float(v) for v in ep.params.affine.ravel()],
            }
        )
    manifest = out / "episodes.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def load_episode_archive(archive_dir) -> list[Episode]:
    root = Path(archive_dir)
    manifest = root / "episodes.json"
    if not manifest.exists():
        raise LoadError(f"episode manifest not found: {manifest}")
    episodes = []
    for entry in json.loads(manifest.read_text()):
        stem = entry["stem"]
        params = TransformParams(
            affine=np.asarray(entry["affine"], dtype=np.float64).reshape(2, 3),
            gamma=float(entry["gamma"]),
            seed=int(entry["episode_seed"]),
        )
        episodes.append(
            Episode(
                support_image=Image2D(read_raster(root / f"{stem}_simg.bin")),
                support_mask=MaskMap(read_raster(root / f"{stem}_smsk.bin")),
                query_image=Image2D(read_raster(root / f"{stem}_qimg.bin")),
                query_mask=MaskMap(read_raster(root / f"{stem}_qmsk.bin")),
                params=params,
                episode_seed=int(entry["episode_seed"]),
                class_id=int(entry["class_id"]),
            )
        )
    return episodes
