"""Patch-level easy/hard partitioning of target prediction maps.

Each map is tiled into K x K patches; patch class ``k = row * K + col``.
Within each patch class the B/2 lowest-entropy patches of a batch form the
easy group, the rest the hard group.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .losses import check_simplex


def split_into_patches(p: torch.Tensor, K: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, K*K, C, H/K, W/K), row-major patch classes."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    B, C, H, W = p.shape
    if H % K or W % K:
        raise ValueError(f"map size {H}x{W} not divisible by K={K}")
    h, w = H // K, W // K
    return p.reshape(B, C, K, h, K, w).permute(0, 2, 4, 1, 3, 5).reshape(B, K * K, C, h, w)


def merge_patches(patches: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`split_into_patches`."""
    B, KK, C, h, w = patches.shape
    K = int(round(KK**0.5))
    if K * K != KK:
        raise ValueError(f"{KK} patches do not form a square grid")
    return patches.reshape(B, K, K, C, h, w).permute(0, 3, 1, 4, 2, 5).reshape(B, C, K * h, K * w)


def patch_entropy(p_patch: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Mean per-pixel entropy (natural log) over the last two dims; channels on dim -3."""
    if check:
        check_simplex(p_patch, dim=-3)
    ent = -torch.xlogy(p_patch, p_patch).sum(dim=-3)
    return ent.mean(dim=(-2, -1))


@dataclass
class EasyHardSplit:
    easy: torch.Tensor  # (K*K, B/2) batch indices, per patch class
    hard: torch.Tensor  # (K*K, B/2)

    @property
    def num_patch_classes(self) -> int:
        return self.easy.shape[0]

    def gather(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Select patches from a (B, K*K, C, h, w) grid.

        Returns ``(easy_patches, easy_k, hard_patches, hard_k)`` with patches
        flattened to ``(K*K * B/2, C, h, w)``.
        """
        KK, half = self.easy.shape
        k = torch.arange(KK).repeat_interleave(half)
        easy = patches[self.easy.reshape(-1), k]
        hard = patches[self.hard.reshape(-1), k]
        return easy, k, hard, k.clone()


def rank_easy_hard(entropies: torch.Tensor) -> EasyHardSplit:
    """``entropies`` is (B, K*K). Stable: ties go to the lower batch index first."""
    B = entropies.shape[0]
    if B % 2:
        raise ValueError(f"batch size must be even, got {B}")
    if torch.isnan(entropies).any():
        raise ValueError("NaN entropy")
    order = torch.sort(entropies.detach().T, dim=1, stable=True).indices  # (K*K, B)
    return EasyHardSplit(order[:, : B // 2], order[:, B // 2 :])
