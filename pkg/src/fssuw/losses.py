"""Training objective: mask loss (cross-entropy + dice) plus alignment loss.

The alignment term swaps the roles of query and support: prototypes built
from the query feature under its own predicted mask must segment each
support image back to its ground truth. Degenerate predictions (no
foreground or no background pixels to pool) contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ShapeMismatch
from .matching import (background_prototype, cosine_score, masked_average_pool,
                       score_logits, upsample_logits)

DICE_SMOOTH = 1.0


@dataclass
class LossBreakdown:
    """Scalar record of one iteration's loss terms.

    Invariants: ``mask_loss == ce + dice`` and ``total == mask_loss +
    align_loss``, exactly, in float arithmetic on these fields.
    """

    ce: float
    dice: float
    mask_loss: float
    align_loss: float
    total: float


def _check_shapes(logits: torch.Tensor, gt: torch.Tensor):
    if logits.dim() != 3 or logits.shape[0] != 2:
        raise ShapeMismatch(f"expected [2,H,W] logits, got {tuple(logits.shape)}")
    if tuple(logits.shape[1:]) != tuple(gt.shape):
        raise ShapeMismatch(
            f"logits spatial {tuple(logits.shape[1:])} vs gt {tuple(gt.shape)}")


def cross_entropy(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise negative log softmax of the true class.

    Stabilized through logsumexp (max subtraction), so confident-correct
    predictions underflow to exactly 0 rather than NaN.
    """
    _check_shapes(logits, gt)
    lse = torch.logsumexp(logits, dim=0)
    true_logit = torch.where(gt.bool(), logits[1], logits[0])
    return (lse - true_logit).mean()


def dice_loss(probs_fg: torch.Tensor, gt: torch.Tensor,
              smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft dice on foreground probabilities: 1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s)."""
    if probs_fg.shape != gt.shape:
        raise ShapeMismatch(f"probs {tuple(probs_fg.shape)} vs gt {tuple(gt.shape)}")
    g = gt.to(probs_fg.dtype)
    inter = (probs_fg * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs_fg.sum() + g.sum() + smooth)


def mask_loss(logits: torch.Tensor, gt: torch.Tensor,
              smooth: float = DICE_SMOOTH) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Unweighted cross-entropy + dice; returns (total, ce, dice)."""
    ce = cross_entropy(logits, gt)
    probs_fg = torch.softmax(logits, dim=0)[1]
    dice = dice_loss(probs_fg, gt, smooth)
    return ce + dice, ce, dice


def align_loss(f_supports: Sequence[torch.Tensor], support_gts: Sequence[torch.Tensor],
               f_query: torch.Tensor, query_logits: torch.Tensor,
               temperature: float = 20.0) -> torch.Tensor:
    """Prototype-alignment loss, averaged over the K supports.

    ``query_logits`` must live at feature resolution; its argmax defines the
    predicted query mask used to pool query-side prototypes. If that mask
    has no foreground or no background the episode contributes 0.
    """
    pred = (query_logits[1] > query_logits[0]).to(torch.uint8)
    if not pred.any() or pred.all():
        return torch.zeros((), dtype=f_query.dtype)
    p_fg = masked_average_pool(f_query, pred)
    p_bg = background_prototype(f_query, pred)

    per_shot = []
    for feat, gt in zip(f_supports, support_gts):
        logits = score_logits(cosine_score(p_fg, p_bg, feat), temperature)
        logits = upsample_logits(logits, tuple(gt.shape))
        total, _, _ = mask_loss(logits, gt)
        per_shot.append(total)
    return torch.stack(per_shot).mean()


def total_loss(logits: torch.Tensor, gt: torch.Tensor,
               align: torch.Tensor | None = None,
               smooth: float = DICE_SMOOTH) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine the terms; returns the differentiable scalar and a float record."""
    m, ce, dice = mask_loss(logits, gt, smooth)
    if align is None:
        align = torch.zeros((), dtype=m.dtype)
    tot = m + align
    ce_f, dice_f, align_f = ce.item(), dice.item(), align.item()
    breakdown = LossBreakdown(
        ce=ce_f,
        dice=dice_f,
        mask_loss=ce_f + dice_f,
        align_loss=align_f,
        total=(ce_f + dice_f) + align_f,
    )
    return tot, breakdown
