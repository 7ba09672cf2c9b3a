"""Dual feature extractors producing one low-level and one high-level map.

Two variants share the same output contract (low at stride 2, high at
stride 8, so the low map is always 4x the high map spatially):

* ``SharedFeatureEncoder`` (SFE) -- a VGG-16-shaped five-block conv stack.
  The low tap is the block-2 output; the high output channel-concatenates
  blocks 4 and 5, with block 5 run at dilation 2 so both sit at stride 8.
* ``FeatureEnhancedEncoder`` (FEE) -- a lightweight three-block hierarchical
  conv encoder with GELU activations supplying complementary scene features.
  Low tap is block 1, high tap is block 3.

Widths are configurable; weights are randomly initialized (pretrained
checkpoints are out of scope, but ``save_weights``/``load_weights`` give an
exact round trip keyed to the architecture hash).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import weights as weights_io
from .errors import IndivisibleInput

SFE = "sfe"
FEE = "fee"

LOW_STRIDE = 2
HIGH_STRIDE = 8


@dataclass(frozen=True)
class EncoderConfig:
    variant: str
    base_width: int
    stride_schedule: tuple[int, ...]
    dilate_final: bool = False

    def __post_init__(self):
        if self.variant not in (SFE, FEE):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        low_tap, high_tap = self.tap_indices
        if math.prod(self.stride_schedule[:low_tap]) != LOW_STRIDE:
            raise ValueError("stride schedule must reach stride 2 at the low-level tap")
        if math.prod(self.stride_schedule[:high_tap]) != HIGH_STRIDE:
            raise ValueError("stride schedule must reach stride 8 at the high-level tap")

    @property
    def tap_indices(self) -> tuple[int, int]:
        """(low tap block count, high tap block count), 1-based."""
        return (2, 4) if self.variant == SFE else (1, 3)

    @classmethod
    def sfe(cls, base_width: int = 16) -> "EncoderConfig":
        return cls(variant=SFE, base_width=base_width,
                   stride_schedule=(1, 2, 2, 2, 1), dilate_final=True)

    @classmethod
    def fee(cls, base_width: int = 8) -> "EncoderConfig":
        return cls(variant=FEE, base_width=base_width,
                   stride_schedule=(2, 2, 2), dilate_final=False)

    def fingerprint(self) -> dict:
        d = asdict(self)
        d["stride_schedule"] = list(self.stride_schedule)
        return d


@dataclass
class FeatureBundle:
    """Per-image feature pair: ``low`` at input/2, ``high`` at input/8."""

    low: torch.Tensor
    high: torch.Tensor
    strides: tuple[int, int] = field(default=(LOW_STRIDE, HIGH_STRIDE))


def _check_input(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        batched = False
        image = image.unsqueeze(0)
    elif image.dim() == 4:
        batched = True
    else:
        raise IndivisibleInput(f"expected [3,H,W] or [B,3,H,W], got shape {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % HIGH_STRIDE or w % HIGH_STRIDE:
        raise IndivisibleInput(f"input spatial dims ({h}, {w}) must be divisible by {HIGH_STRIDE}")
    return image, batched


class _VggBlock(nn.Module):
    """n_convs 3x3 conv+ReLU layers, optionally preceded by a 2x2 max pool."""

    def __init__(self, in_ch, out_ch, n_convs, pool, dilation=1):
        super().__init__()
        self.pool = nn.MaxPool2d(2, 2) if pool else None
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch,
                                    kernel_size=3, padding=dilation, dilation=dilation))
            layers.append(nn.ReLU(inplace=True))
        self.convs = nn.Sequential(*layers)

    def forward(self, x):
        if self.pool is not None:
            x = self.pool(x)
        return self.convs(x)


class SharedFeatureEncoder(nn.Module):
    """VGG-16-shaped encoder; low = block 2, high = cat(block 4, block 5)."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig.sfe()
        if self.config.variant != SFE:
            raise ValueError("SharedFeatureEncoder requires an 'sfe' config")
        w = self.config.base_width
        strides = self.config.stride_schedule
        widths = (w, 2 * w, 4 * w, 8 * w, 8 * w)
        n_convs = (2, 2, 3, 3, 3)
        blocks = []
        in_ch = 3
        for i in range(5):
            dilation = 2 if (i == 4 and self.config.dilate_final) else 1
            blocks.append(_VggBlock(in_ch, widths[i], n_convs[i],
                                    pool=strides[i] == 2, dilation=dilation))
            in_ch = widths[i]
        self.blocks = nn.ModuleList(blocks)
        self.low_channels = widths[1]
        self.high_channels = widths[3] + widths[4]

    def forward(self, image: torch.Tensor) -> FeatureBundle:
        x, batched = _check_input(image)
        x = self.blocks[0](x)
        low = self.blocks[1](x)
        x = self.blocks[2](low)
        b4 = self.blocks[3](x)
        b5 = self.blocks[4](b4)
        high = torch.cat([b4, b5], dim=1)
        if not batched:
            low, high = low.squeeze(0), high.squeeze(0)
        return FeatureBundle(low=low, high=high)

    encode = forward

    def save_weights(self, path, meta=None):
        return weights_io.save_module(self, path, self.config.fingerprint(), meta)

    def load_weights(self, path):
        return weights_io.load_module(self, path, self.config.fingerprint())


class _ResidualConvGelu(nn.Module):
    """x + GELU(conv3x3(x)); width-preserving."""

    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, kernel_size=3, padding=1)

    def forward(self, x):
        return x + F.gelu(self.conv(x))


class _FeeBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
        self.res1 = _ResidualConvGelu(out_ch)
        self.res2 = _ResidualConvGelu(out_ch)

    def forward(self, x):
        x = F.gelu(self.down(x))
        return self.res2(self.res1(x))


class FeatureEnhancedEncoder(nn.Module):
    """Three-block hierarchical conv encoder; low = block 1, high = block 3."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig.fee()
        if self.config.variant != FEE:
            raise ValueError("FeatureEnhancedEncoder requires a 'fee' config")
        w = self.config.base_width
        widths = (w, 2 * w, 4 * w)
        strides = self.config.stride_schedule
        self.blocks = nn.ModuleList(
            _FeeBlock(3 if i == 0 else widths[i - 1], widths[i], strides[i])
            for i in range(3)
        )
        self.low_channels = widths[0]
        self.high_channels = widths[2]

    def forward(self, image: torch.Tensor) -> FeatureBundle:
        x, batched = _check_input(image)
        low = self.blocks[0](x)
        x = self.blocks[1](low)
        high = self.blocks[2](x)
        if not batched:
            low, high = low.squeeze(0), high.squeeze(0)
        return FeatureBundle(low=low, high=high)

    encode = forward

    def save_weights(self, path, meta=None):
        return weights_io.save_module(self, path, self.config.fingerprint(), meta)

    def load_weights(self, path):
        return weights_io.load_module(self, path, self.config.fingerprint())
