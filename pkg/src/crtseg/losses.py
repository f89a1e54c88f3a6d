"""Cross-entropy objectives, the alignment regularizer, and Dice scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import MaskMap
from .errors import ValidationError

CLAMP_EPS = 1e-8
_SUM_TOL = 1e-2  # pre-condition check only; finite-difference probes perturb probs


@dataclass(frozen=True)
class LossReport:
    seg: float
    reg: float
    total: float
    lam: float = 1.0


def seg_loss(pred_probs: torch.Tensor, target: MaskMap) -> torch.Tensor:
    """Mean pixelwise cross-entropy of probabilities against a binary mask.

    -(1/HW) sum_{h,w,j} target_j(h,w) * log(clamp(pred_j(h,w), 1e-8, 1)).
    Differentiable in pred_probs; returns a scalar tensor.
    """
    if pred_probs.ndim != 3:
        raise ValidationError(
            f"pred_probs must be (J+1, H, W), got {tuple(pred_probs.shape)}"
        )
    n_classes = pred_probs.shape[0]
    if tuple(pred_probs.shape[1:]) != target.data.shape:
        raise ValidationError(
            f"prediction {tuple(pred_probs.shape[1:])} and target "
            f"{target.data.shape} shapes differ"
        )
    if int(target.data.max(initial=0)) >= n_classes:
        raise ValidationError("target labels exceed prediction channels")
    sums = pred_probs.detach().sum(dim=0)
    if (sums - 1.0).abs().max().item() > _SUM_TOL:
        raise ValidationError("pred_probs do not sum to 1 over classes")
    onehot = torch.from_numpy(
        np.stack([(target.data == j) for j in range(n_classes)]).astype(np.float64)
    ).to(pred_probs.dtype)
    logp = torch.log(pred_probs.clamp(CLAMP_EPS, 1.0))
    h, w = target.data.shape
    return -(onehot * logp).sum() / (h * w)


def alignment_loss(support_probs_as_query: torch.Tensor, support_mask: MaskMap) -> torch.Tensor:
    """Cross-entropy of the role-swapped pass against the original support mask.

    Same numerics as seg_loss, different inputs: the query's predicted mask
    acted as the support annotation and the support image was re-segmented.
    """
    return seg_loss(support_probs_as_query, support_mask)


def total_loss(seg, reg, lam: float = 1.0) -> LossReport:
    seg_f = float(seg)
    reg_f = float(reg)
    return LossReport(seg=seg_f, reg=reg_f, total=seg_f + lam * reg_f, lam=lam)


def dice(pred: MaskMap, gt: MaskMap) -> float:
    """Overlap score 2|A n B| / (|A| + |B|) in [0, 1].

    Both masks empty scores 1.0 by convention; exactly one empty scores 0.0.
    """
    for name, mask in (("pred", pred), ("gt", gt)):
        if not np.all((mask.data == 0) | (mask.data == 1)):
            raise ValidationError(f"{name} mask must be binary for Dice")
    if pred.data.shape != gt.data.shape:
        raise ValidationError(
            f"shape mismatch {pred.data.shape} vs {gt.data.shape}"
        )
    a = int(pred.data.sum())
    b = int(gt.data.sum())
    if a + b == 0:
        return 1.0
    inter = int(np.logical_and(pred.data, gt.data).sum())
    return 2.0 * inter / (a + b)


@dataclass
class DiceReport:
    """Per-class Dice means over evaluated episodes.

    Classes that never appear in the dataset are listed in not_evaluated
    rather than scored zero. both-empty episodes count as Dice 1.0.
    """

    per_class: dict[int, float] = field(default_factory=dict)
    episode_counts: dict[int, int] = field(default_factory=dict)
    not_evaluated: list[int] = field(default_factory=list)

    @property
    def mean_dice(self) -> float | None:
        if not self.per_class:
            return None
        return float(np.mean(list(self.per_class.values())))

    def to_json(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "episode_counts": {str(k): v for k, v in sorted(self.episode_counts.items())},
            "not_evaluated": sorted(self.not_evaluated),
            "mean_dice": self.mean_dice,
        }
