"""Composite training loss: equally weighted soft-Dice and cross-entropy terms.

Three head types share one entry point: `binary` (single sigmoid channel),
`multilabel` (per-class sigmoid, the ensemble heads), and `multiclass`
(softmax over background + classes). The Dice term is one minus the
smoothed soft Dice, computed globally over the batch per class; the
multiclass Dice averages foreground classes only so large backgrounds do not
swamp small organs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.nn import functional as F

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossReport:
    """Detached per-batch loss terms; total = 0.5*dice_term + 0.5*ce_term."""

    dice_term: float
    ce_term: float
    total: float


def _soft_dice(probs: torch.Tensor, target: torch.Tensor, smooth: float) -> torch.Tensor:
    """Mean smoothed soft Dice over the class axis; inputs (B, C, H, W)."""
    dims = (0, 2, 3)
    intersection = (probs * target).sum(dim=dims)
    denom = probs.sum(dim=dims) + target.sum(dim=dims)
    return ((2.0 * intersection + smooth) / (denom + smooth)).mean()


def _batched(t: torch.Tensor, spatial_rank: int) -> torch.Tensor:
    return t if t.ndim == spatial_rank + 2 else t[None]


def composite_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    head: str = "binary",
    smooth: float = DICE_SMOOTH,
) -> tuple[torch.Tensor, LossReport]:
    """Differentiable total loss and a detached report of its terms.

    binary:     logits (B, 1, H, W), target binary of the same shape.
    multilabel: logits (B, C, H, W), target multi-hot of the same shape.
    multiclass: logits (B, K, H, W), target integer label map (B, H, W).
    """
    logits = _batched(logits, 2)
    if head in ("binary", "multilabel"):
        if target.ndim == 2:
            target = target[None, None]
        elif target.ndim == 3:
            # (B, H, W) for binary heads, (C, H, W) for an unbatched multilabel sample
            target = target[:, None] if head == "binary" else target[None]
        if target.shape != logits.shape:
            raise ValueError(f"target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
        target = target.to(logits.dtype)
        probs = torch.sigmoid(logits)
        dice_term = 1.0 - _soft_dice(probs, target, smooth)
        ce_term = F.binary_cross_entropy_with_logits(logits, target)
    elif head == "multiclass":
        target = target if target.ndim == 3 else target[None]
        if target.shape != (logits.shape[0], *logits.shape[2:]):
            raise ValueError(f"label map shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
        target = target.long()
        probs = torch.softmax(logits, dim=1)
        onehot = F.one_hot(target, num_classes=logits.shape[1]).permute(0, 3, 1, 2).to(logits.dtype)
        dice_term = 1.0 - _soft_dice(probs[:, 1:], onehot[:, 1:], smooth)
        ce_term = F.cross_entropy(logits, target)
    else:
        raise ValueError(f"unknown head {head!r}")

    total = 0.5 * dice_term + 0.5 * ce_term
    report = LossReport(
        dice_term=float(dice_term.detach()),
        ce_term=float(ce_term.detach()),
        total=float(total.detach()),
    )
    return total, report
