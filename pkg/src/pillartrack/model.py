"""End-to-end network: pillars -> shared backbone -> similarity -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, backbone_preset
from .decoder import DecoderConfig, DecoderOutput, PredictionSet, SetDecoder
from .encoder import EncoderConfig, SimilarityEncoder
from .pillars import (
    CAR_SEARCH_PILLARS,
    CAR_TEMPLATE_PILLARS,
    PillarConfig,
    PillarFeatureNet,
    PillarTensor,
    PointCloud,
    pillarize,
)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str | BackboneConfig = "desk-small"
    pillar_channels: int = 16
    search_pillars: PillarConfig = CAR_SEARCH_PILLARS
    template_pillars: PillarConfig = CAR_TEMPLATE_PILLARS
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


class TrackNet(nn.Module):
    """Siamese tracker head-to-tail; both branches share every parameter."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.pillar_net = PillarFeatureNet(cfg.pillar_channels, dtype=dtype)
        bcfg = (cfg.backbone if isinstance(cfg.backbone, BackboneConfig)
                else backbone_preset(cfg.backbone))
        self.backbone = Backbone(bcfg, in_channels=cfg.pillar_channels, dtype=dtype)
        self.encoder = SimilarityEncoder(bcfg.channels, cfg.encoder, dtype=dtype)
        self.decoder = SetDecoder(cfg.encoder.width, cfg.decoder,
                                  cfg.search_pillars, stride=4, dtype=dtype)

    def bev_from_pillars(self, tensors: list[PillarTensor]) -> torch.Tensor:
        """Run the pillar net per sample and stack into a (B, C, H, W) batch."""
        return torch.stack([self.pillar_net(pt).tensor for pt in tensors])

    def forward(self, search_bev: torch.Tensor, template_bev: torch.Tensor,
                proposal_index: torch.Tensor | None = None) -> DecoderOutput:
        ms_search = self.backbone(search_bev)
        ms_template = self.backbone(template_bev)
        fused = self.encoder(ms_search, ms_template)
        return self.decoder(fused, proposal_index=proposal_index)

    def forward_pillars(self, search: list[PillarTensor],
                        template: list[PillarTensor],
                        proposal_index: torch.Tensor | None = None) -> DecoderOutput:
        return self(self.bev_from_pillars(search), self.bev_from_pillars(template),
                    proposal_index=proposal_index)

    def predict(self, search_pc: PointCloud, template_pc: PointCloud,
                seed: int = 0) -> PredictionSet:
        """Single-frame inference from raw crops (already in crop frames)."""
        search_pt = pillarize(search_pc, self.cfg.search_pillars, seed=seed)
        template_pt = pillarize(template_pc, self.cfg.template_pillars, seed=seed)
        with torch.no_grad():
            out = self.forward_pillars([search_pt], [template_pt])
        return out.prediction_set(0)


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> TrackNet:
    """Construct a TrackNet with seed-determined initial parameters."""
    torch.manual_seed(seed)
    return TrackNet(cfg)
