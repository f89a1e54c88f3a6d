"""Static PNG overlay export for episodes and predictions."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# one shared tint: a perfect prediction renders identically to the truth
MASK_COLOR = (235, 64, 52)
ALPHA = 0.45


def overlay(image: np.ndarray, mask: np.ndarray, color) -> PILImage.Image:
    """Blend a binary mask over a [0, 1] grayscale image."""
    gray = np.clip(image, 0.0, 1.0)
    rgb = np.repeat((gray * 255).astype(np.float64)[..., None], 3, axis=2)
    tint = np.asarray(color, dtype=np.float64)
    hit = mask.astype(bool)
    rgb[hit] = (1 - ALPHA) * rgb[hit] + ALPHA * tint
    return PILImage.fromarray(rgb.round().astype(np.uint8), mode="RGB")


def render_episode(episode, prediction, out_dir, stem: str) -> list[Path]:
    """Write the support/truth/prediction overlay trio for one episode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trio = [
        ("support", episode.support_image.data, episode.support_mask.data),
        ("truth", episode.query_image.data, episode.query_mask.data),
        ("pred", episode.query_image.data, prediction.full_label),
    ]
    paths = []
    for name, image, mask in trio:
        path = out / f"{stem}_{name}.png"
        overlay(image, mask, MASK_COLOR).save(path)
        paths.append(path)
    return paths
