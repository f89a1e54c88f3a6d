"""Prototype extraction and cosine-similarity classification.

Local prototypes average features over non-overlapping windows whose
foreground (or background) fraction clears a threshold; one class-level
prototype per class comes from masked average pooling so small structures
are never lost. Query positions are scored by scaled cosine similarity
against every prototype, per-class maps are fused with a softmax over the
prototype axis, and a softmax across classes yields probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import FeatureMap
from .errors import EmptyClassMask, ValidationError

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ALPConfig:
    """Local-prototype pooling window, gate threshold, and cosine scale."""

    window: tuple[int, int] = (4, 4)
    fg_threshold: float = 0.95
    alpha: float = 20.0

    def __post_init__(self):
        if self.window[0] < 1 or self.window[1] < 1:
            raise ValidationError(f"window must be positive, got {self.window}")
        if not 0 < self.fg_threshold <= 1:
            raise ValidationError(
                f"fg_threshold must be in (0, 1], got {self.fg_threshold}"
            )
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class Prototype:
    vector: torch.Tensor
    class_id: int
    kind: str  # "local" | "global"
    origin: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("local", "global"):
            raise ValidationError(f"unknown prototype kind {self.kind!r}")
        if self.kind == "local" and self.origin is None:
            raise ValidationError("local prototypes carry a window index")


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: list[Prototype]
    classes: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        present = {p.class_id for p in self.prototypes}
        missing = [c for c in self.classes if c not in present]
        if missing:
            raise ValidationError(f"classes {missing} have no prototype")

    def for_class(self, class_id: int) -> list[int]:
        return [i for i, p in enumerate(self.prototypes) if p.class_id == class_id]


@dataclass(frozen=True)
class ScoreMaps:
    """Per-prototype and per-class fused similarity maps over the query grid."""

    per_prototype: torch.Tensor  # (P, H', W')
    fused: torch.Tensor  # (J+1, H', W'), class index order == classes
    classes: tuple[int, ...]
    alpha: float


def _as_mask_tensor(mask_ds, like: torch.Tensor) -> torch.Tensor:
    arr = np.asarray(mask_ds)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError("downsampled mask must be binary")
    return torch.from_numpy(arr.astype(np.float64)).to(like.dtype)


def local_prototypes(
    features: FeatureMap, mask_ds, cfg: ALPConfig, class_id: int = 1
) -> list[Prototype]:
    """Window-averaged prototypes for windows dominated by `class_id` pixels.

    Windows tile the feature grid without overlap; remainder rows/cols that
    do not fill a window are dropped. A window qualifies when its mask
    fraction is >= cfg.fg_threshold, and its prototype is the plain average
    of the features in the window.
    """
    lh, lw = cfg.window
    fh, fw = features.spatial
    if lh > fh or lw > fw:
        raise ValidationError(
            f"window {cfg.window} exceeds feature grid ({fh}, {fw})"
        )
    mask = _as_mask_tensor(mask_ds, features.data)
    if tuple(mask.shape) != (fh, fw):
        raise ValidationError(
            f"mask shape {tuple(mask.shape)} != feature grid ({fh}, {fw})"
        )
    out = []
    for m in range(fh // lh):
        for n in range(fw // lw):
            rows = slice(m * lh, (m + 1) * lh)
            cols = slice(n * lw, (n + 1) * lw)
            if mask[rows, cols].mean() >= cfg.fg_threshold:
                vec = features.data[:, rows, cols].mean(dim=(1, 2))
                out.append(
                    Prototype(vector=vec, class_id=class_id, kind="local", origin=(m, n))
                )
    return out


def class_prototype(features: FeatureMap, mask_ds, class_id: int) -> Prototype:
    """Masked average pooling: sum(mask * f) / sum(mask) over the grid."""
    mask = _as_mask_tensor(mask_ds, features.data)
    total = mask.sum()
    if total.item() == 0:
        raise EmptyClassMask(f"class {class_id} has no pixel at feature resolution")
    vec = (features.data * mask).sum(dim=(1, 2)) / total
    return Prototype(vector=vec, class_id=class_id, kind="global", origin=None)


def assemble_prototype_set(
    features: FeatureMap, support_mask_ds, cfg: ALPConfig
) -> PrototypeSet:
    """Concatenate class-level and gated local prototypes for both classes.

    Raises EmptyClassMask when either the foreground or the background
    vanished at feature resolution; callers skip such episodes.
    """
    fg = np.asarray(support_mask_ds).astype(np.int32)
    bg = 1 - fg
    protos = [class_prototype(features, bg, 0)]
    protos += local_prototypes(features, bg, cfg, class_id=0)
    protos.append(class_prototype(features, fg, 1))
    protos += local_prototypes(features, fg, cfg, class_id=1)
    return PrototypeSet(prototypes=protos, classes=(0, 1))


def similarity_maps(protos: PrototypeSet, f_q: FeatureMap, alpha: float) -> ScoreMaps:
    """Scaled cosine similarity of every prototype against every position.

    Zero-norm features or prototypes score 0 (epsilon-guarded), keeping all
    values in [-alpha, alpha]. Per-class fused maps combine a class's maps
    with softmax-over-prototypes weights at each location.
    """
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    d = f_q.data.shape[0]
    mat = torch.stack([p.vector for p in protos.prototypes])  # (P, D)
    if mat.shape[1] != d:
        raise ValidationError(f"prototype dim {mat.shape[1]} != feature dim {d}")
    flat = f_q.data.reshape(d, -1)  # (D, N)
    dots = mat @ flat  # (P, N)
    p_norm = mat.norm(dim=1, keepdim=True).clamp_min(COSINE_EPS)
    f_norm = flat.norm(dim=0, keepdim=True).clamp_min(COSINE_EPS)
    cos = dots / (p_norm * f_norm)
    per_prototype = (alpha * cos).reshape(len(protos.prototypes), *f_q.spatial)

    fused = []
    for class_id in protos.classes:
        idx = protos.for_class(class_id)
        maps = per_prototype[idx]  # (P_c, H', W')
        weights = torch.softmax(maps, dim=0)
        fused.append((weights * maps).sum(dim=0))
    return ScoreMaps(
        per_prototype=per_prototype,
        fused=torch.stack(fused),
        classes=protos.classes,
        alpha=alpha,
    )


@dataclass(frozen=True)
class Prediction:
    probs: torch.Tensor  # (J+1, H', W') class probabilities on the feature grid
    label_map: np.ndarray  # (H', W') argmax labels, ties to background
    full_probs: torch.Tensor  # (J+1, H, W) bilinearly upsampled probabilities
    full_label: np.ndarray  # (H, W) argmax of full_probs


def export_score_maps(scoremaps: ScoreMaps, out_dir) -> list:
    """Debug export: one raster per prototype map plus the fused class maps."""
    from pathlib import Path

    from .data import write_raster

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    per = scoremaps.per_prototype.detach().cpu().numpy()
    for i in range(per.shape[0]):
        path = out / f"prototype_{i:03d}.bin"
        write_raster(path, per[i].astype(np.float32))
        written.append(path)
    fused = scoremaps.fused.detach().cpu().numpy()
    for class_id, fmap in zip(scoremaps.classes, fused):
        path = out / f"class_{class_id}_fused.bin"
        write_raster(path, fmap.astype(np.float32))
        written.append(path)
    return written


def predict(scoremaps: ScoreMaps, out_size: tuple[int, int]) -> Prediction:
    """Class softmax of the fused maps, upsampled to the input resolution.

    Probabilities are upsampled bilinearly (they still sum to 1 pointwise),
    and label maps take the argmax with ties resolved toward background.
    """
    probs = torch.softmax(scoremaps.fused, dim=0)
    full = F.interpolate(
        probs.unsqueeze(0), size=out_size, mode="bilinear", align_corners=False
    ).squeeze(0)
    # np.argmax returns the first maximum, and background is class index 0
    label_map = np.argmax(probs.detach().cpu().numpy(), axis=0).astype(np.int32)
    full_label = np.argmax(full.detach().cpu().numpy(), axis=0).astype(np.int32)
    return Prediction(probs=probs, label_map=label_map, full_probs=full, full_label=full_label)
