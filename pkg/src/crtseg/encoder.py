"""Feature extractor mapping a grayscale slice to a D x H' x W' feature map.

The default desk-scale backbone is a 4-stage convolutional encoder with
GroupNorm (batch size 1 territory, so no BatchNorm) and a linear 1x1 head,
downsampling by a total stride of 4 or 8 with ceil semantics. Large
pretrained backbones can be plugged in behind the same architecture id
without touching callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import Image2D
from .errors import ValidationError

ARCHITECTURES = ("conv4",)


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "conv4"
    feature_dim: int = 64
    stride: int = 8
    init_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown encoder architecture {self.architecture!r}")
        if self.feature_dim < 8:
            raise ValidationError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if self.stride not in (4, 8):
            raise ValidationError(f"stride must be 4 or 8, got {self.stride}")


@dataclass(frozen=True)
class FeatureMap:
    """Dense features for one image; data has shape (D, H', W')."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError(f"feature map must be DxH'xW', got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


def _stage(in_ch, out_ch, stride, kernel=3):
    groups = max(1, out_ch // 8)
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=kernel, stride=stride, padding=kernel // 2),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    """4-stage conv encoder; final head is linear so features keep sign."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        downs = 3 if config.stride == 8 else 2
        chans = [16, 32, 64][:downs]
        stages = []
        in_ch = 3
        for ch in chans:
            stages.append(_stage(in_ch, ch, stride=2))
            in_ch = ch
        # final stage uses a 1x1 kernel: a 3x3 at full stride would widen the
        # receptive field enough to bleed organ appearance into prototypes
        # pooled from neighboring background windows
        stages.append(_stage(in_ch, 64, stride=1, kernel=1))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(64, config.feature_dim, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (1, H, W) or (3, H, W); grayscale is replicated to 3 channels."""
        if x.ndim != 3:
            raise ValidationError(f"expected (C, H, W) input, got {tuple(x.shape)}")
        if x.shape[0] == 1:
            x = x.expand(3, -1, -1)
        elif x.shape[0] != 3:
            raise ValidationError(f"expected 1 or 3 channels, got {x.shape[0]}")
        return self.head(self.stages(x.unsqueeze(0))).squeeze(0)


def build_encoder(config: EncoderConfig) -> ConvEncoder:
    """Construct the encoder with weights seeded by config.init_seed."""
    with torch.random.fork_rng():
        torch.manual_seed(config.init_seed)
        return ConvEncoder(config)


def image_to_tensor(image: Image2D, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.data)).to(dtype).unsqueeze(0)


def extract_features(
    model: ConvEncoder, image: Image2D, mode: str = "eval"
) -> FeatureMap:
    """Run the encoder on one image; eval mode detaches into inference.

    Support and query images within an episode must go through the same
    model instance (shared parameters).
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown mode {mode!r}")
    cfg = model.config
    was_training = model.training
    model.train(mode == "train")
    try:
        x = image_to_tensor(image, dtype=next(model.parameters()).dtype)
        if mode == "eval":
            with torch.no_grad():
                out = model(x)
        else:
            out = model(x)
    finally:
        model.train(was_training)
    expected = (
        math.ceil(image.height / cfg.stride),
        math.ceil(image.width / cfg.stride),
    )
    if tuple(out.shape[1:]) != expected:
        raise ValidationError(
            f"feature map {tuple(out.shape[1:])} does not match declared "
            f"stride {cfg.stride} (expected {expected})"
        )
    return FeatureMap(data=out, stride=cfg.stride)
