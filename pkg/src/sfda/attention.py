"""Dual attention module used for distillation.

Features ``F`` are handled as ``(B, N1, C1)`` with ``N1 = H1 * W1``. Both
attention maps are stored column-stochastic: ``S[:, i, j]`` is the weight
of position ``i`` on position ``j`` and every column ``S[:, :, j]`` sums to 1.
Same for the channel map ``R``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class AttentionPack:
    spatial: torch.Tensor  # (B, N1, N1)
    channel: torch.Tensor  # (B, C1, C1)
    dual: torch.Tensor  # (B, N1, 2*C1)

    @property
    def size_M(self) -> int:
        return self.dual.shape[-2] * self.dual.shape[-1]


def flatten_features(feat: torch.Tensor) -> torch.Tensor:
    """(B, C1, H1, W1) -> (B, N1, C1), row-major positions."""
    B, C, H, W = feat.shape
    return feat.reshape(B, C, H * W).transpose(1, 2)


def _check_finite(f: torch.Tensor) -> None:
    if not torch.isfinite(f).all():
        raise ValueError("attention input contains non-finite values")


def spatial_attention(f: torch.Tensor) -> torch.Tensor:
    """Softmax over positions ``i`` of the position Gram matrix, per column ``j``."""
    _check_finite(f)
    gram = f @ f.transpose(-1, -2)  # (B, N1, N1), symmetric
    return torch.softmax(gram, dim=-2)


def channel_attention(f: torch.Tensor) -> torch.Tensor:
    """Softmax over channels ``i`` of the channel Gram matrix, per column ``j``."""
    _check_finite(f)
    gram = f.transpose(-1, -2) @ f  # (B, C1, C1)
    return torch.softmax(gram, dim=-2)


def attend(f_spatial: torch.Tensor, f_channel: torch.Tensor) -> AttentionPack:
    """Both maps plus the concatenated recombined features.

    Spatial branch row ``j`` is ``sum_i s_ji F[i, :]``; channel branch column
    ``j`` is ``sum_i r_ji F[:, i]``. Both are ``(B, N1, C1)``.
    """
    S = spatial_attention(f_spatial)
    R = channel_attention(f_channel)
    spatial_out = S.transpose(-1, -2) @ f_spatial
    channel_out = f_channel @ R
    return AttentionPack(S, R, torch.cat([spatial_out, channel_out], dim=-1))


class DualAttention(nn.Module):
    """1x1 projection per branch followed by spatial/channel self-attention.

    The projections are part of the distillation metric, not the student, so
    they are shared by teacher and student branches and kept out of every
    optimizer. ``init="scaled"`` (default) starts from ``I * c**-0.25`` so the
    Gram logits are normalised by ``sqrt(c)`` (``c`` = channels for the spatial
    map, positions for the channel map); ``init="identity"`` uses plain ``I``.
    """

    def __init__(self, channels: int, num_positions: int = 16, init: str = "scaled"):
        super().__init__()
        self.channels = channels
        self.spatial_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.channel_proj = nn.Conv2d(channels, channels, 1, bias=False)
        eye = torch.eye(channels)[:, :, None, None]
        if init == "identity":
            s_scale = c_scale = 1.0
        elif init == "scaled":
            s_scale, c_scale = channels ** -0.25, num_positions ** -0.25
        else:
            raise ValueError(f"unknown init {init!r}")
        with torch.no_grad():
            self.spatial_proj.weight.copy_(eye * s_scale)
            self.channel_proj.weight.copy_(eye * c_scale)

    def project_features(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if feat.ndim != 4 or feat.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W) features, got {tuple(feat.shape)}")
        return self.spatial_proj(feat), self.channel_proj(feat)

    def forward(self, feat: torch.Tensor) -> AttentionPack:
        fs, fc = self.project_features(feat)
        return attend(flatten_features(fs), flatten_features(fc))


def dual_attention(feat: torch.Tensor, module: DualAttention | None = None) -> AttentionPack:
    """DAM on a ``(B, C1, H1, W1)`` grid; without a module, no projection."""
    if module is not None:
        return module(feat)
    f = flatten_features(feat)
    return attend(f, f)


def adapt_pool(feat: torch.Tensor, target_shape: tuple[int, int]) -> torch.Tensor:
    """Adaptive average pooling down to ``target_shape``; never upsamples."""
    H, W = feat.shape[-2:]
    h, w = target_shape
    if h > H or w > W:
        raise ValueError(f"cannot pool {H}x{W} up to {h}x{w}")
    if (h, w) == (H, W):
        return feat
    return F.adaptive_avg_pool2d(feat, (h, w))
