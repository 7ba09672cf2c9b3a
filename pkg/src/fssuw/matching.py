"""Prototype construction and query scoring.

Support features are summarized by masked average pooling into foreground
and background prototypes; query pixels are scored by cosine similarity
against both and the two-channel score map, scaled by a temperature, acts
as segmentation logits. The module also provides the training-free prior
mask (per-pixel max correlation against masked support features) and a
scalar fragility score quantifying how well such a prior separates the
true foreground from the background.

Masked sums are accumulated in row-major pixel order (via ``cumsum``) so
results are bit-identical to a naive per-pixel loop at the same precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import torch
import torch.nn.functional as F

from .errors import DegenerateGT, EmptyMask, PolarityMismatch, ShapeMismatch

EPS = 1e-8

Polarity = Literal["foreground", "background"]


@dataclass
class Prototype:
    vector: torch.Tensor  # [C']
    polarity: Polarity
    shots_merged: int = 1


@dataclass
class ScoreMap:
    fg_scores: torch.Tensor  # [H', W'] in [-1, 1]
    bg_scores: torch.Tensor  # [H', W'] in [-1, 1]


@dataclass
class PriorMask:
    values: torch.Tensor  # [H', W'] in [0, 1]


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor downsample of a {0,1} mask to a feature grid."""
    if tuple(mask.shape) == tuple(size):
        return mask
    out = F.interpolate(mask[None, None].float(), size=size, mode="nearest")
    return out[0, 0].to(mask.dtype)


def _ordered_sum(x: torch.Tensor) -> torch.Tensor:
    """Sum over the last axis in strict left-to-right order."""
    return torch.cumsum(x, dim=-1)[..., -1]


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor) -> Prototype:
    """Average feature vectors over foreground pixels of ``mask``.

    ``features`` is [C, H', W']; ``mask`` is a {0,1} map at any resolution
    and is nearest-downsampled to the feature grid first.
    """
    c, h, w = features.shape
    m = downsample_mask(mask, (h, w)).to(features.dtype)
    denom = _ordered_sum(m.reshape(-1))
    if denom.item() == 0:
        raise EmptyMask("support mask is empty at feature resolution")
    num = _ordered_sum((features * m).reshape(c, -1))
    return Prototype(vector=num / denom, polarity="foreground", shots_merged=1)


def background_prototype(features: torch.Tensor, mask: torch.Tensor) -> Prototype:
    """Masked average pool over the complement of ``mask``."""
    h, w = features.shape[-2:]
    m = downsample_mask(mask, (h, w))
    inverted = 1 - m.to(features.dtype)
    if not inverted.any():
        raise EmptyMask("mask covers the whole image; no background pixels")
    proto = masked_average_pool(features, inverted)
    proto.polarity = "background"
    return proto


def merge_prototypes(protos: Sequence[Prototype]) -> Prototype:
    """Arithmetic per-channel mean of K same-polarity prototypes."""
    if not protos:
        raise ValueError("need at least one prototype")
    if len(protos) == 1:
        return protos[0]
    polarity = protos[0].polarity
    dim = protos[0].vector.shape
    for p in protos[1:]:
        if p.polarity != polarity:
            raise PolarityMismatch(f"cannot merge {polarity} with {p.polarity}")
        if p.vector.shape != dim:
            raise ShapeMismatch("prototype dimensions differ")
    mean = torch.stack([p.vector for p in protos]).mean(dim=0)
    return Prototype(vector=mean, polarity=polarity, shots_merged=len(protos))


def _cosine_to_vector(vec: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine similarity between ``vec`` [C] and features [C,H,W];
    zero norms are epsilon-guarded, output clamped to the cosine range."""
    dots = torch.einsum("c,chw->hw", vec, features)
    vnorm = torch.linalg.vector_norm(vec).clamp_min(EPS)
    fnorm = torch.linalg.vector_norm(features, dim=0).clamp_min(EPS)
    return (dots / (vnorm * fnorm)).clamp(-1.0, 1.0)


def cosine_score(p_fg: Prototype, p_bg: Prototype, f_query: torch.Tensor) -> ScoreMap:
    """Cosine similarity of every query pixel against both prototypes."""
    return ScoreMap(
        fg_scores=_cosine_to_vector(p_fg.vector, f_query),
        bg_scores=_cosine_to_vector(p_bg.vector, f_query),
    )


def score_logits(scores: ScoreMap, temperature: float = 20.0) -> torch.Tensor:
    """Two-channel logits [2, H', W'] with background first."""
    return temperature * torch.stack([scores.bg_scores, scores.fg_scores])


def upsample_logits(logits: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
    if tuple(logits.shape[-2:]) == tuple(out_size):
        return logits
    return F.interpolate(logits[None], size=out_size, mode="bilinear",
                         align_corners=False)[0]


def predict_mask(scores: ScoreMap, out_size: tuple[int, int],
                 temperature: float = 20.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Upsampled logits and the hard mask (ties resolve to background)."""
    logits = upsample_logits(score_logits(scores, temperature), out_size)
    mask = (logits[1] > logits[0]).to(torch.uint8)
    return mask, logits


def prior_mask(f_query_high: torch.Tensor, f_support_high: torch.Tensor,
               support_mask: torch.Tensor) -> PriorMask:
    """Training-free foreground prior for the query image.

    Each query pixel takes its maximum cosine similarity over masked support
    feature pixels; the map is then min-max normalized. A flat map (max ==
    min) degenerates to all zeros instead of dividing by zero.
    """
    c, h, w = f_query_high.shape
    if f_support_high.shape != f_query_high.shape:
        raise ShapeMismatch(
            f"query {tuple(f_query_high.shape)} vs support {tuple(f_support_high.shape)}")
    m = downsample_mask(support_mask, (h, w)).reshape(-1).bool()
    if not m.any():
        raise EmptyMask("support mask is empty at feature resolution")

    q = f_query_high.reshape(c, -1)
    s = f_support_high.reshape(c, -1)[:, m]
    qn = q / torch.linalg.vector_norm(q, dim=0, keepdim=True).clamp_min(EPS)
    sn = s / torch.linalg.vector_norm(s, dim=0, keepdim=True).clamp_min(EPS)
    sims = qn.T @ sn  # [HW, n_masked]
    best = sims.max(dim=1).values.reshape(h, w)

    lo, hi = best.min(), best.max()
    if (hi - lo).item() == 0:
        return PriorMask(values=torch.zeros_like(best))
    return PriorMask(values=((best - lo) / (hi - lo)).clamp(0.0, 1.0))


def fragility_score(prior: PriorMask, gt_mask: torch.Tensor) -> float:
    """Mean prior value inside the ground-truth foreground minus the mean
    outside; 1.0 is a perfectly separating prior, 0.0 carries no signal."""
    gt = gt_mask.bool()
    if gt.shape != prior.values.shape:
        raise ShapeMismatch(f"prior {tuple(prior.values.shape)} vs gt {tuple(gt.shape)}")
    if not gt.any() or gt.all():
        raise DegenerateGT("ground truth must contain both classes")
    inside = prior.values[gt].mean()
    outside = prior.values[~gt].mean()
    return float(inside - outside)
