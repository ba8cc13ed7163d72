"""Training objectives for knowledge transfer and self-supervised adaptation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .attention import AttentionPack

EPS = 1e-8
SIMPLEX_TOL = 1e-4


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # MAE
    beta: float = 0.5  # source-source attention distillation
    tau: float | None = None  # source-target attention distillation; None -> beta
    gamma: float = 0.01  # adversarial patch term

    def __post_init__(self):
        if self.tau is None:
            object.__setattr__(self, "tau", self.beta)
        for name in ("alpha", "beta", "tau", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def check_simplex(p: torch.Tensor, dim: int = 1, tol: float = SIMPLEX_TOL) -> None:
    s = p.detach().sum(dim=dim)
    if (p.detach() < -tol).any() or ((s - 1).abs() > tol).any():
        raise ValueError("probability map is not on the simplex over channels")


def max_square_loss(p: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Negative mean over pixels of sum_c p^2. ``p`` is (B, C, H, W)."""
    if check:
        check_simplex(p)
    return -(p**2).sum(dim=1).mean()


def bns_loss(stats: Sequence[tuple[torch.Tensor, torch.Tensor]], snapshot) -> torch.Tensor:
    """Squared L2 between batch and stored BN statistics, summed over layers.

    ``snapshot`` entries are ``BNEntry`` or ``(mean, var)`` pairs.
    """
    if len(stats) != len(snapshot):
        raise ValueError(f"layer count mismatch: {len(stats)} batch stats vs {len(snapshot)} stored")
    total = 0.0
    for (mu, var), ref in zip(stats, snapshot):
        ref_mu, ref_var = (ref.mean, ref.var) if hasattr(ref, "mean") and hasattr(ref, "var") else ref
        total = total + ((mu - ref_mu) ** 2).sum() + ((var - ref_var) ** 2).sum()
    return total


def mae_loss(pred_shared: torch.Tensor, pred_frozen: torch.Tensor, detach_frozen: bool = True) -> torch.Tensor:
    """Mean absolute elementwise difference, i.e. (1/C)||.||_1 averaged over pixels and batch."""
    if pred_shared.shape != pred_frozen.shape:
        raise ValueError(f"shape mismatch {tuple(pred_shared.shape)} vs {tuple(pred_frozen.shape)}")
    if detach_frozen:
        pred_frozen = pred_frozen.detach()
    return (pred_shared - pred_frozen).abs().mean()


def dad_ss_loss(A_frozen: AttentionPack, A_shared: AttentionPack, detach_frozen: bool = True) -> torch.Tensor:
    """Per-sample (1/M) L1 distance between dual attention maps, batch mean.

    The generator objective needs gradients through the frozen side (they
    reach the generator via the fake images), hence ``detach_frozen``.
    """
    a, b = A_frozen.dual, A_shared.dual
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if detach_frozen:
        a = a.detach()
    return (a - b).abs().mean()


def kl_columns(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean over columns (and batch) of sum_i p_i log(p_i / q_i); columns on dim -2."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    terms = torch.xlogy(p, p) - p * torch.log(q.clamp_min(EPS))
    return terms.sum(dim=-2).mean()


def dad_st_loss(S_src: torch.Tensor, R_src: torch.Tensor, S_tgt: torch.Tensor, R_tgt: torch.Tensor) -> torch.Tensor:
    """KL(source || target) for the spatial map plus the same for the channel map.

    Batches are paired by index and truncated to the smaller one.
    """
    n = min(S_src.shape[0], S_tgt.shape[0])
    return kl_columns(S_src[:n], S_tgt[:n]) + kl_columns(R_src[:n], R_tgt[:n])


def _check_scores(scores: torch.Tensor) -> None:
    d = scores.detach()
    if ((d <= 0) | (d >= 1)).any():
        raise ValueError("discriminator scores must lie strictly inside (0, 1)")


def adv_loss_D(easy_scores: torch.Tensor, hard_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: easy patches -> 1, hard patches -> 0, mean over terms."""
    _check_scores(easy_scores)
    _check_scores(hard_scores)
    n = easy_scores.numel() + hard_scores.numel()
    s = torch.log(easy_scores.clamp_min(EPS)).sum() + torch.log((1 - hard_scores).clamp_min(EPS)).sum()
    return -s / n


def adv_loss_T(hard_scores: torch.Tensor) -> torch.Tensor:
    """Segmentation-side loss: push hard patches to be scored easy."""
    if hard_scores.numel() == 0:
        raise ValueError("empty hard group")
    _check_scores(hard_scores)
    return -torch.log(hard_scores.clamp_min(EPS)).mean()


def adv_loss_D_logits(easy_logits: torch.Tensor, hard_logits: torch.Tensor) -> torch.Tensor:
    """:func:`adv_loss_D` computed from pre-sigmoid scores (no saturation at float32)."""
    n = easy_logits.numel() + hard_logits.numel()
    return -(F.logsigmoid(easy_logits).sum() + F.logsigmoid(-hard_logits).sum()) / n


def adv_loss_T_logits(hard_logits: torch.Tensor) -> torch.Tensor:
    if hard_logits.numel() == 0:
        raise ValueError("empty hard group")
    return -F.logsigmoid(hard_logits).mean()


def generator_objective(bns, mae, dad_ss, dad_st, w: LossWeights = LossWeights()):
    return bns - w.alpha * mae - w.beta * dad_ss + w.tau * dad_st


def transfer_objective(mae, dad_ss, w: LossWeights = LossWeights()):
    return w.alpha * mae + w.beta * dad_ss


def adaptation_objective(tar, mae, dad_ss, adv, w: LossWeights = LossWeights()):
    return tar + w.alpha * mae + w.beta * dad_ss + w.gamma * adv

