"""Hierarchical 2D feature extractor over BEV maps.

Four transformer stages produce feature maps at strides 4, 8, 16 and 32 of
the pillar grid. Structure follows the pyramid-ViT family: overlapping
strided patch embedding per stage, attention with optional spatial
reduction of keys/values, and a feed-forward with a depthwise conv in the
hidden layer. Blocks use the shared attention primitives with post-norm
residual wiring.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import MultiHeadAttention, init_transformer_weights

STAGE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    ffn_expansion: tuple[int, int, int, int]
    sr_ratios: tuple[int, int, int, int]
    patch_kernels: tuple[int, int, int, int] = (7, 3, 3, 3)
    patch_strides: tuple[int, int, int, int] = (4, 2, 2, 2)
    normalize: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("channels", "depths", "heads", "ffn_expansion", "sr_ratios",
                     "patch_kernels", "patch_strides"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} must have one entry per stage")
        cumulative = []
        s = 1
        for ps in self.patch_strides:
            s *= ps
            cumulative.append(s)
        if tuple(cumulative) != STAGE_STRIDES:
            raise ValueError(f"cumulative strides {cumulative} != {STAGE_STRIDES}")
        for c, h in zip(self.channels, self.heads):
            if c % h != 0:
                raise ValueError(f"stage width {c} not divisible by {h} heads")


BACKBONE_PRESETS = {
    # the full-size configuration: heads [1,2,5,8], depths [3,4,6,3],
    # ffn expansion [8,8,4,8], channels [64,128,320,512]
    "pvtv2-b2-paper": BackboneConfig(
        channels=(64, 128, 320, 512),
        depths=(3, 4, 6, 3),
        heads=(1, 2, 5, 8),
        ffn_expansion=(8, 8, 4, 8),
        sr_ratios=(8, 4, 2, 1),
    ),
    # shrunk so gradient checks and overfit runs finish in minutes on a CPU
    "desk-small": BackboneConfig(
        channels=(16, 32, 64, 128),
        depths=(1, 1, 1, 1),
        heads=(1, 2, 4, 8),
        ffn_expansion=(2, 2, 2, 2),
        sr_ratios=(2, 1, 1, 1),
    ),
}


def backbone_preset(name: str) -> BackboneConfig:
    if name not in BACKBONE_PRESETS:
        raise KeyError(f"unknown backbone preset {name!r}; "
                       f"options: {sorted(BACKBONE_PRESETS)}")
    return BACKBONE_PRESETS[name]


@dataclass
class MultiScaleFeatures:
    """Batched feature maps (B, C_i, H/s, W/s) at strides 4, 8, 16, 32."""

    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor

    strides = STAGE_STRIDES

    def as_list(self) -> list[torch.Tensor]:
        return [self.c2, self.c3, self.c4, self.c5]


def _make_norm(dim: int, cfg: BackboneConfig, dtype):
    if cfg.normalize:
        return nn.LayerNorm(dim, eps=cfg.eps, dtype=dtype)
    return nn.Identity()


class OverlapPatchEmbed(nn.Module):
    """Strided conv with overlapping receptive fields; emits token sequences."""

    def __init__(self, in_ch, out_ch, kernel, stride, cfg, dtype):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride,
                              padding=kernel // 2, dtype=dtype)
        self.norm = _make_norm(out_ch, cfg, dtype)

    def forward(self, x):
        x = self.conv(x)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        return self.norm(tokens), (h, w)


class ConvFeedForward(nn.Module):
    """fc -> depthwise 3x3 conv -> ReLU -> fc, operating on token grids."""

    def __init__(self, dim, hidden, dtype):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=dtype)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden,
                                dtype=dtype)
        self.fc2 = nn.Linear(hidden, dim, dtype=dtype)

    def forward(self, tokens, hw):
        h, w = hw
        x = self.fc1(tokens)
        b, n, c = x.shape
        grid = x.transpose(1, 2).reshape(b, c, h, w)
        grid = self.dwconv(grid)
        x = grid.flatten(2).transpose(1, 2)
        return self.fc2(torch.relu(x))


class SpatialReduction(nn.Module):
    """Shrink the key/value token grid by a strided conv before attention."""

    def __init__(self, dim, ratio, cfg, dtype):
        super().__init__()
        self.ratio = ratio
        self.conv = nn.Conv2d(dim, dim, ratio, stride=ratio, dtype=dtype)
        self.norm = _make_norm(dim, cfg, dtype)

    def forward(self, tokens, hw):
        h, w = hw
        if h % self.ratio or w % self.ratio:
            raise ValueError(f"grid {hw} not divisible by reduction {self.ratio}")
        b, n, c = tokens.shape
        grid = tokens.transpose(1, 2).reshape(b, c, h, w)
        reduced = self.conv(grid).flatten(2).transpose(1, 2)
        return self.norm(reduced)


class BackboneBlock(nn.Module):
    def __init__(self, dim, heads, expansion, sr_ratio, cfg, dtype):
        super().__init__()
        self.mha = MultiHeadAttention(dim, heads, dtype=dtype)
        self.ffn = ConvFeedForward(dim, dim * expansion, dtype=dtype)
        self.norm1 = _make_norm(dim, cfg, dtype)
        self.norm2 = _make_norm(dim, cfg, dtype)
        self.sr = SpatialReduction(dim, sr_ratio, cfg, dtype) if sr_ratio > 1 else None

    def forward(self, tokens, hw):
        kv = self.sr(tokens, hw) if self.sr is not None else tokens
        y = self.norm1(tokens + self.mha(tokens, kv, kv))
        return self.norm2(y + self.ffn(y, hw))


class Backbone(nn.Module):
    """Shared multi-scale extractor; the same instance serves both branches."""

    def __init__(self, cfg: BackboneConfig, in_channels: int, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.patch_embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        prev = in_channels
        for i in range(4):
            self.patch_embeds.append(OverlapPatchEmbed(
                prev, cfg.channels[i], cfg.patch_kernels[i], cfg.patch_strides[i],
                cfg, dtype))
            self.stages.append(nn.ModuleList([
                BackboneBlock(cfg.channels[i], cfg.heads[i], cfg.ffn_expansion[i],
                              cfg.sr_ratios[i], cfg, dtype)
                for _ in range(cfg.depths[i])
            ]))
            prev = cfg.channels[i]
        init_transformer_weights(self)

    def forward(self, x: torch.Tensor) -> MultiScaleFeatures:
        """x: (B, C, H, W) with H and W divisible by 32."""
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input dims {h}x{w} must be divisible by 32")
        outputs = []
        for embed, blocks in zip(self.patch_embeds, self.stages):
            tokens, hw = embed(x)
            for block in blocks:
                tokens = block(tokens, hw)
            x = tokens.transpose(1, 2).reshape(x.shape[0], -1, *hw)
            outputs.append(x)
        return MultiScaleFeatures(*outputs)
