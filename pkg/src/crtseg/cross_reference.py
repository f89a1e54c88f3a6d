"""Bidirectional cross-attention block with fused channel gating.

Support features are masked to steer attention at the foreground, tokens from
both images attend to each other in both directions, each direction's output
is globally pooled and squeezed through a two-layer FC gate (ReLU + sigmoid),
and the two gates are fused by element-wise product. The fused gate reweights
the original (unmasked) feature maps channel-wise, so background context
stays available downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import MaskMap
from .encoder import FeatureMap
from .errors import ValidationError


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 64
    heads: int = 1
    init_seed: int = 0
    tie_directions: bool = False

    def __post_init__(self):
        if self.dim < 8:
            raise ValidationError(f"attention dim must be >= 8, got {self.dim}")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ValidationError(
                f"heads must divide dim, got dim={self.dim} heads={self.heads}"
            )


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool a binary mask by `stride` then threshold at 0.5.

    Blocks with foreground fraction >= 0.5 map to 1. Partial border blocks
    average over their valid pixels only. Output is ceil(H/stride) x
    ceil(W/stride), matching encoder shapes.
    """
    arr = np.asarray(mask, dtype=np.float64)
    h, w = arr.shape
    oh, ow = math.ceil(h / stride), math.ceil(w / stride)
    out = np.zeros((oh, ow), dtype=np.int32)
    for i in range(oh):
        for j in range(ow):
            block = arr[i * stride : (i + 1) * stride, j * stride : (j + 1) * stride]
            if block.mean() >= 0.5:
                out[i, j] = 1
    return out


def mask_support_features(features: FeatureMap, support_mask: MaskMap) -> FeatureMap:
    """Zero background positions of the support features.

    The full-resolution binary mask is downsampled to the feature grid
    (average-then-threshold) and broadcast over channels.
    """
    if not np.all((support_mask.data == 0) | (support_mask.data == 1)):
        raise ValidationError("support mask must be binary")
    ds = downsample_mask(support_mask.data, features.stride)
    if ds.shape != features.spatial:
        raise ValidationError(
            f"mask downsampled to {ds.shape} but features are {features.spatial}"
        )
    gate = torch.from_numpy(ds).to(features.data.dtype)
    return FeatureMap(data=features.data * gate, stride=features.stride)


def cross_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    return_weights: bool = False,
):
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    The softmax runs over the key axis, so each output row is a convex
    combination of value rows.
    """
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise ValidationError("attention inputs must be 2D token matrices")
    if queries.shape[1] != keys.shape[1]:
        raise ValidationError(
            f"query dim {queries.shape[1]} != key dim {keys.shape[1]}"
        )
    if keys.shape[0] != values.shape[0]:
        raise ValidationError(
            f"key count {keys.shape[0]} != value count {values.shape[0]}"
        )
    d = queries.shape[1]
    logits = queries @ keys.T / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    out = weights @ values
    if return_weights:
        return out, weights
    return out


class GateBlock(nn.Module):
    """Two linear layers with ReLU between and sigmoid output, in (0, 1)^D."""

    def __init__(self, feature_dim: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, feature_dim // reduction)
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, feature_dim)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(v))))


def fc_gate(v: torch.Tensor, block: GateBlock) -> torch.Tensor:
    return block(v)


def global_pool(features) -> torch.Tensor:
    """Per-channel spatial mean of a (D, H', W') map."""
    data = features.data if isinstance(features, FeatureMap) else features
    return data.mean(dim=(1, 2))


class _DirectionProjections(nn.Module):
    def __init__(self, feature_dim: int, dim: int):
        super().__init__()
        self.w_q = nn.Linear(feature_dim, dim, bias=False)
        self.w_k = nn.Linear(feature_dim, dim, bias=False)
        self.w_v = nn.Linear(feature_dim, dim, bias=False)
        self.w_out = nn.Linear(dim, feature_dim, bias=False)


class CrossReferenceBlock(nn.Module):
    """Mask, cross-attend both ways, pool, gate, and reweight both maps.

    The two directions keep separate projection and gate parameters unless
    config.tie_directions shares them (used by symmetry checks).
    """

    def __init__(self, feature_dim: int, config: AttentionConfig):
        super().__init__()
        self.feature_dim = feature_dim
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.init_seed)
            self.proj_sq = _DirectionProjections(feature_dim, config.dim)
            self.gate_sq = GateBlock(feature_dim)
            if config.tie_directions:
                self.proj_qs = self.proj_sq
                self.gate_qs = self.gate_sq
            else:
                self.proj_qs = _DirectionProjections(feature_dim, config.dim)
                self.gate_qs = GateBlock(feature_dim)

    def _attend(self, proj, from_tokens, to_tokens):
        q = proj.w_q(from_tokens)
        k = proj.w_k(to_tokens)
        v = proj.w_v(to_tokens)
        h = self.config.heads
        if h == 1:
            mixed = cross_attention(q, k, v)
        else:
            chunks = [
                cross_attention(qh, kh, vh)
                for qh, kh, vh in zip(q.chunk(h, 1), k.chunk(h, 1), v.chunk(h, 1))
            ]
            mixed = torch.cat(chunks, dim=1)
        return proj.w_out(mixed)

    def gates(self, f_s: FeatureMap, f_q: FeatureMap, support_mask: MaskMap):
        """Return (w_s, w_q, fused) channel gates for one support/query pair."""
        if f_s.data.shape != f_q.data.shape:
            raise ValidationError(
                f"support/query feature shapes differ: "
                f"{tuple(f_s.data.shape)} vs {tuple(f_q.data.shape)}"
            )
        d_ch = f_s.data.shape[0]
        if d_ch != self.feature_dim:
            raise ValidationError(
                f"block built for {self.feature_dim} channels, got {d_ch}"
            )
        masked = mask_support_features(f_s, support_mask)
        tokens_s = masked.data.reshape(d_ch, -1).T
        tokens_q = f_q.data.reshape(d_ch, -1).T
        # support tokens query the query image, and vice versa
        attn_sq = self._attend(self.proj_sq, tokens_s, tokens_q)
        attn_qs = self._attend(self.proj_qs, tokens_q, tokens_s)
        w_s = self.gate_sq(attn_sq.mean(dim=0))
        w_q = self.gate_qs(attn_qs.mean(dim=0))
        return w_s, w_q, w_s * w_q

    def forward(self, f_s: FeatureMap, f_q: FeatureMap, support_mask: MaskMap):
        _, _, fused = self.gates(f_s, f_q, support_mask)
        gate = fused[:, None, None]
        return (
            FeatureMap(data=f_s.data * gate, stride=f_s.stride),
            FeatureMap(data=f_q.data * gate, stride=f_q.stride),
        )


def build_cross_reference(feature_dim: int, config: AttentionConfig) -> CrossReferenceBlock:
    return CrossReferenceBlock(feature_dim, config)
