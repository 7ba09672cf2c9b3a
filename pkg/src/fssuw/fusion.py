"""Feature fusion: merge the two encoders' maps into final per-image features.

Pipeline (per support/query pair, though all ops broadcast over any batch):

1. high path -- channel-concat SFE and FEE high features, shared 1x1 conv
   projection to ``c_prime`` channels (at H/8 x W/8);
2. low path -- same concat+1x1 recipe on the low features (at H/2 x W/2),
   giving the raw low map;
3. alignment -- the raw low map runs through a two-stage conv/GELU/pool
   module (``AlignmentModule``) that lands exactly on the high grid;
4. combine -- element-wise sum of the two paths, then slice the leading
   support/query axis into the final feature pair.

Ablations: ``use_fee=False`` drops the FEE inputs from both concats;
``use_fam=False`` replaces stage 3 with parameter-free average pooling;
``swap_roles=True`` routes the high path through alignment and carries the
low path instead (streams are resized so the output grid stays H/8 x W/8).
With both ``use_fee`` and ``use_fam`` off the low path is dropped entirely
and the pipeline reduces to projected SFE high features.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IndivisibleInput, ShapeMismatch


@dataclass(frozen=True)
class FusionConfig:
    c_prime: int = 64
    use_fee: bool = True
    use_fam: bool = True
    swap_roles: bool = False

    def __post_init__(self):
        if self.c_prime < 2 or self.c_prime % 2:
            raise ValueError("c_prime must be even and >= 2")

    @property
    def use_low(self) -> bool:
        # the doubly-ablated config is the pure high-level baseline
        return self.use_fam or self.use_fee

    def fingerprint(self) -> dict:
        return asdict(self)


class AlignmentModule(nn.Module):
    """Two stages of [conv3x3 -> GELU -> conv1x1 -> maxpool 2x2]; 4x spatial
    reduction with channel schedule C' -> C'/2 -> C'."""

    def __init__(self, c_prime: int):
        super().__init__()
        half = c_prime // 2
        self.conv3_a = nn.Conv2d(c_prime, c_prime, kernel_size=3, padding=1)
        self.conv1_a = nn.Conv2d(c_prime, half, kernel_size=1)
        self.conv3_b = nn.Conv2d(half, half, kernel_size=3, padding=1)
        self.conv1_b = nn.Conv2d(half, c_prime, kernel_size=1)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise IndivisibleInput(f"alignment input spatial dims ({h}, {w}) must be divisible by 4")
        x = self.pool(self.conv1_a(F.gelu(self.conv3_a(x))))
        x = self.pool(self.conv1_b(F.gelu(self.conv3_b(x))))
        return x


def _resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


@dataclass
class FusedPair:
    f_support: torch.Tensor
    f_query: torch.Tensor


class FeatureFusion(nn.Module):
    """Projection + alignment over concatenated encoder features.

    Args:
        config: fusion hyper-parameters and ablation switches.
        sfe_high_ch / sfe_low_ch: channel counts of the shared encoder taps.
        fee_high_ch / fee_low_ch: channel counts of the enhanced encoder taps
            (ignored when ``config.use_fee`` is false).
    """

    def __init__(self, config: FusionConfig, sfe_high_ch: int, sfe_low_ch: int,
                 fee_high_ch: int = 0, fee_low_ch: int = 0):
        super().__init__()
        self.config = config
        high_in = sfe_high_ch + (fee_high_ch if config.use_fee else 0)
        self.project_high = nn.Conv2d(high_in, config.c_prime, kernel_size=1)
        if config.use_low:
            low_in = sfe_low_ch + (fee_low_ch if config.use_fee else 0)
            self.project_low = nn.Conv2d(low_in, config.c_prime, kernel_size=1)
        else:
            self.project_low = None
        self.align = AlignmentModule(config.c_prime) if config.use_fam else None

    # --- pairwise (support, query) surface ---

    def fuse_high(self, fs, es, fq, eq) -> torch.Tensor:
        """Concat + shared 1x1 projection of high features; returns
        [2, C', H', W'] with support at index 0 and query at index 1."""
        stacked = torch.stack([self._cat_streams(fs, es), self._cat_streams(fq, eq)])
        return self.project_high(stacked)

    def fuse_low_raw(self, fs_low, es_low, fq_low, eq_low) -> torch.Tensor:
        """Concat + shared 1x1 projection of low features at the low grid."""
        if self.project_low is None:
            raise ShapeMismatch("fusion configured without a low-level path")
        stacked = torch.stack([self._cat_streams(fs_low, es_low),
                               self._cat_streams(fq_low, eq_low)])
        return self.project_low(stacked)

    def combine_and_split(self, f_high: torch.Tensor, f_low: torch.Tensor | None = None) -> FusedPair:
        """Element-wise sum, then slice the leading axis into (F_s, F_q).

        ``f_low`` with mismatched spatial dims is bilinearly resized onto the
        high grid first (the swapped-roles pipeline produces such streams).
        """
        if f_low is not None:
            if f_low.shape[0] != f_high.shape[0] or f_low.shape[1] != f_high.shape[1]:
                raise ShapeMismatch(
                    f"cannot combine streams {tuple(f_high.shape)} and {tuple(f_low.shape)}")
            f_high = f_high + _resize(f_low, f_high.shape[-2:])
        return FusedPair(f_support=f_high[0], f_query=f_high[1])

    def _cat_streams(self, sfe_feat, fee_feat):
        if not self.config.use_fee or fee_feat is None:
            return sfe_feat
        if sfe_feat.shape[-2:] != fee_feat.shape[-2:]:
            raise ShapeMismatch(
                f"encoder features disagree spatially: {tuple(sfe_feat.shape)} vs {tuple(fee_feat.shape)}")
        return torch.cat([sfe_feat, fee_feat], dim=0 if sfe_feat.dim() == 3 else 1)

    # --- batched surface used by the episode model ---

    def fuse_batch(self, high_cat: torch.Tensor, low_cat: torch.Tensor | None) -> torch.Tensor:
        """Fuse pre-concatenated features for a batch of images.

        high_cat: [B, N_high, H', W']; low_cat: [B, N_low, 4H', 4W'] or None.
        Returns the final per-image features [B, C', H', W'].
        """
        high_raw = self.project_high(high_cat)
        target = high_raw.shape[-2:]
        if self.project_low is None or low_cat is None:
            return high_raw
        low_raw = self.project_low(low_cat)

        if self.config.swap_roles:
            aligned_src, carrier = high_raw, low_raw
        else:
            aligned_src, carrier = low_raw, high_raw

        if self.align is not None:
            src = _resize(aligned_src, (4 * target[0], 4 * target[1]))
            aligned = self.align(src)
        else:
            aligned = F.adaptive_avg_pool2d(aligned_src, target)
        return _resize(carrier, target) + aligned

    def forward(self, high_support, low_support, high_query, low_query) -> FusedPair:
        """Full pipeline for one (support, query) pair of pre-concatenated
        feature maps; returns the final feature pair at [C', H', W']."""
        high_cat = torch.stack([high_support, high_query])
        low_cat = None
        if self.project_low is not None and low_support is not None:
            low_cat = torch.stack([low_support, low_query])
        fused = self.fuse_batch(high_cat, low_cat)
        return FusedPair(f_support=fused[0], f_query=fused[1])
