"""End-to-end episode model: dual encoders -> fusion -> prototype matching.

All K support images and the query run through the encoders and fusion as
one batch (the ops are strictly per-sample, so batching is only a speed
convenience). Foreground/background prototypes are pooled per shot, merged,
and the query is scored by cosine similarity at a fixed temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import weights as weights_io
from .encoders import EncoderConfig, FeatureEnhancedEncoder, SharedFeatureEncoder
from .episodes import Episode
from .fusion import FeatureFusion, FusionConfig
from .matching import (ScoreMap, background_prototype, cosine_score, masked_average_pool,
                       merge_prototypes, score_logits, upsample_logits)


@dataclass(frozen=True)
class ModelConfig:
    sfe_width: int = 16
    fee_width: int = 8
    c_prime: int = 64
    use_fee: bool = True
    use_fam: bool = True
    swap_roles: bool = False
    temperature: float = 20.0

    def encoder_configs(self) -> tuple[EncoderConfig, EncoderConfig]:
        return EncoderConfig.sfe(self.sfe_width), EncoderConfig.fee(self.fee_width)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(c_prime=self.c_prime, use_fee=self.use_fee,
                            use_fam=self.use_fam, swap_roles=self.swap_roles)

    def fingerprint(self) -> dict:
        return {
            "sfe_width": self.sfe_width, "fee_width": self.fee_width,
            "c_prime": self.c_prime, "use_fee": self.use_fee,
            "use_fam": self.use_fam, "swap_roles": self.swap_roles,
            "temperature": self.temperature,
        }


@dataclass
class ModelOutput:
    query_logits: torch.Tensor            # [2, R, R] at episode resolution
    feature_logits: torch.Tensor          # [2, H', W'] before upsampling
    scores: ScoreMap
    f_query: torch.Tensor                 # [C', H', W']
    f_supports: list[torch.Tensor]        # K x [C', H', W']
    prototypes: tuple = field(default=())


class FssuwNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        sfe_cfg, fee_cfg = self.config.encoder_configs()
        self.sfe = SharedFeatureEncoder(sfe_cfg)
        self.fee = FeatureEnhancedEncoder(fee_cfg) if self.config.use_fee else None
        self.fusion = FeatureFusion(
            self.config.fusion_config(),
            sfe_high_ch=self.sfe.high_channels, sfe_low_ch=self.sfe.low_channels,
            fee_high_ch=self.fee.high_channels if self.fee else 0,
            fee_low_ch=self.fee.low_channels if self.fee else 0,
        )

    @property
    def temperature(self) -> float:
        return self.config.temperature

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """Encode + fuse a batch of images [B, 3, H, W] -> [B, C', H/8, W/8]."""
        sfe_bundle = self.sfe(images)
        if self.fee is not None:
            fee_bundle = self.fee(images)
            high = torch.cat([sfe_bundle.high, fee_bundle.high], dim=1)
            low = torch.cat([sfe_bundle.low, fee_bundle.low], dim=1)
        else:
            high, low = sfe_bundle.high, sfe_bundle.low
        return self.fusion.fuse_batch(high, low if self.fusion.config.use_low else None)

    def forward(self, episode: Episode) -> ModelOutput:
        images = torch.stack([img for img, _ in episode.supports] + [episode.query_image])
        feats = self.extract_features(images)
        f_supports = [feats[i] for i in range(episode.k)]
        f_query = feats[episode.k]

        fg = merge_prototypes([
            masked_average_pool(f_supports[i], episode.supports[i][1])
            for i in range(episode.k)
        ])
        bg = merge_prototypes([
            background_prototype(f_supports[i], episode.supports[i][1])
            for i in range(episode.k)
        ])
        scores = cosine_score(fg, bg, f_query)
        feature_logits = score_logits(scores, self.temperature)
        query_logits = upsample_logits(feature_logits, tuple(episode.query_gt.shape))
        return ModelOutput(query_logits=query_logits, feature_logits=feature_logits,
                           scores=scores, f_query=f_query, f_supports=f_supports,
                           prototypes=(fg, bg))

    def predict(self, episode: Episode, out_size: tuple[int, int] | None = None) -> torch.Tensor:
        """Hard query mask at ``out_size`` (defaults to the episode grid)."""
        out = self.forward(episode)
        logits = out.query_logits if out_size is None else upsample_logits(
            out.feature_logits, out_size)
        return (logits[1] > logits[0]).to(torch.uint8)

    def save_weights(self, path, meta=None):
        return weights_io.save_module(self, path, self.config.fingerprint(), meta)

    def load_weights(self, path):
        return weights_io.load_module(self, path, self.config.fingerprint())
