"""Similarity encoder fusing template and search branches across scales.

Default wiring ("late" fusion): at every backbone scale the two branch
features are projected to a common width by a shared 1x1 conv, search
pixels cross-attend over template pixels, the per-scale similarity maps
are propagated top-down FPN-style, upsampled to the finest scale,
concatenated, mixed by a 1x1 conv and refined by one self-attention
block. Alternative similarity operators (cosine / euclidean / xcorr) and
fusion strategies (early / single-scale) are selectable for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionBlock, init_transformer_weights, sinusoidal_grid_encoding
from .backbone import MultiScaleFeatures
from .pillars import BEVFeature

SIMILARITY_KINDS = ("attention", "cosine", "euclidean", "xcorr")
FUSION_KINDS = ("late", "early", "c2", "c5")


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 64
    heads: int = 8
    depth: int = 1
    ffn_hidden: int | None = None
    similarity: str = "attention"
    fusion: str = "late"
    use_pos_enc: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        if self.similarity not in SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    def with_overrides(self, **kwargs) -> "EncoderConfig":
        return replace(self, **kwargs)


def cosine_similarity_map(search: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
    """Best cosine match per search pixel over all template pixels: (B, Hs, Ws)."""
    b, c = search.shape[:2]
    s = search.flatten(2).transpose(1, 2)                     # (B, Ns, C)
    t = template.flatten(2).transpose(1, 2)                   # (B, Nt, C)
    s = s / s.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    t = t / t.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sim = (s @ t.transpose(1, 2)).max(dim=-1).values          # (B, Ns)
    return sim.reshape(b, *search.shape[2:])


def euclidean_distance_map(search: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
    """Distance to the nearest template pixel in feature space: (B, Hs, Ws)."""
    b = search.shape[0]
    s = search.flatten(2).transpose(1, 2)
    t = template.flatten(2).transpose(1, 2)
    dist = torch.cdist(s, t).min(dim=-1).values
    return dist.reshape(b, *search.shape[2:])


def xcorr_map(search: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
    """Sliding-window correlation of the template over the search map.

    Response at (y, x) sums search[y+dy-cy, x+dx-cx] * template[dy, dx] with
    zero padding and center (cy, cx) = (Ht//2, Wt//2), normalized by the
    window element count. Returns (B, Hs, Ws).
    """
    b, c, hs, ws = search.shape
    ht, wt = template.shape[-2:]
    cy, cx = ht // 2, wt // 2
    out = []
    for i in range(b):
        resp = F.conv2d(search[i:i + 1], template[i:i + 1], padding=(cy, cx))
        out.append(resp[0, 0, :hs, :ws])
    return torch.stack(out) / (c * ht * wt)


def alt_similarity(search: torch.Tensor, template: torch.Tensor, kind: str) -> torch.Tensor:
    """Non-attention similarity: scale the search feature by a per-pixel map.

    cosine uses the best-match cosine; euclidean uses 1/(1 + d) with d the
    nearest-template distance; xcorr uses the normalized sliding response.
    """
    if kind == "cosine":
        sim = cosine_similarity_map(search, template)
    elif kind == "euclidean":
        sim = 1.0 / (1.0 + euclidean_distance_map(search, template))
    elif kind == "xcorr":
        sim = xcorr_map(search, template)
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    return search * sim.unsqueeze(1)


def upsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="nearest")


class SimilarityEncoder(nn.Module):
    """Cross-branch similarity + multi-scale fusion producing one BEV map."""

    def __init__(self, in_channels: tuple[int, int, int, int],
                 cfg: EncoderConfig = EncoderConfig(), dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        e = cfg.width
        self._pos_cache: dict = {}

        scales = {"late": [0, 1, 2, 3], "early": [0, 1, 2, 3], "c2": [0], "c5": [3]}
        self.active_scales = scales[cfg.fusion]
        # shared between branches; one projection per active scale
        self.proj = nn.ModuleDict({
            str(i): nn.Conv2d(in_channels[i], e, 1, dtype=dtype)
            for i in self.active_scales
        })

        def cross_blocks():
            return nn.ModuleList([
                AttentionBlock(e, cfg.heads, cfg.ffn_hidden or e, eps=cfg.eps,
                               dtype=dtype)
                for _ in range(cfg.depth)
            ])

        if cfg.similarity == "attention":
            if cfg.fusion == "early":
                self.cross = nn.ModuleDict({"fused": cross_blocks()})
            else:
                self.cross = nn.ModuleDict({str(i): cross_blocks()
                                            for i in self.active_scales})

        if cfg.fusion in ("late", "early"):
            self.lateral = nn.ModuleList([nn.Conv2d(e, e, 1, dtype=dtype)
                                          for _ in range(3)])
            self.smooth = nn.ModuleList([nn.Conv2d(e, e, 3, padding=1, dtype=dtype)
                                         for _ in range(3)])
            self.merge_conv = nn.Conv2d(4 * e, e, 1, dtype=dtype)

        self.self_attn = AttentionBlock(e, cfg.heads, cfg.ffn_hidden or e,
                                        eps=cfg.eps, dtype=dtype)
        init_transformer_weights(self)

    def _pos(self, h: int, w: int) -> torch.Tensor | None:
        if not self.cfg.use_pos_enc:
            return None
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_grid_encoding(
                h, w, self.cfg.width, dtype=self.dtype)
        return self._pos_cache[key]

    def cross_similarity(self, scale: int, c_search: torch.Tensor,
                         c_template: torch.Tensor) -> torch.Tensor:
        """Similarity feature at one scale; spatial dims follow the search map."""
        proj = self.proj[str(scale)]
        e_s, e_t = proj(c_search), proj(c_template)
        if self.cfg.similarity != "attention":
            return alt_similarity(e_s, e_t, self.cfg.similarity)
        return self._attend(self.cross[str(scale)], e_s, e_t)

    def _attend(self, blocks, e_s: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        b, e, hs, ws = e_s.shape
        ht, wt = e_t.shape[-2:]
        q = e_s.flatten(2).transpose(1, 2)
        kv = e_t.flatten(2).transpose(1, 2)
        q_pos, k_pos = self._pos(hs, ws), self._pos(ht, wt)
        for block in blocks:
            q = block(q, kv, kv, q_pos=q_pos, k_pos=k_pos)
        return q.transpose(1, 2).reshape(b, e, hs, ws)

    def fpn_propagate(self, p: list[torch.Tensor]) -> list[torch.Tensor]:
        """Top-down pass: coarse scales refresh the finer ones."""
        out = [None, None, None, p[3]]
        for i in (3, 2, 1):
            lateral = self.lateral[i - 1](p[i - 1])
            out[i - 1] = self.smooth[i - 1](lateral + upsample_nearest(out[i], 2))
        return out

    def multiscale_merge(self, p: list[torch.Tensor]) -> torch.Tensor:
        """Upsample to the finest grid, concat, 1x1 mix, one self-attention."""
        base = p[0]
        gathered = [base] + [upsample_nearest(p[i], 2 ** i) for i in (1, 2, 3)]
        u = self.merge_conv(torch.cat(gathered, dim=1))
        return self._self_attend(u)

    def _self_attend(self, u: torch.Tensor) -> torch.Tensor:
        b, e, h, w = u.shape
        tokens = u.flatten(2).transpose(1, 2)
        pos = self._pos(h, w)
        tokens = self.self_attn(tokens, tokens, tokens, q_pos=pos, k_pos=pos)
        return tokens.transpose(1, 2).reshape(b, e, h, w)

    def forward(self, search: MultiScaleFeatures,
                template: MultiScaleFeatures) -> BEVFeature:
        s_list, t_list = search.as_list(), template.as_list()
        fusion = self.cfg.fusion
        if fusion == "late":
            p = [self.cross_similarity(i, s_list[i], t_list[i]) for i in range(4)]
            fused = self.multiscale_merge(self.fpn_propagate(p))
        elif fusion == "early":
            branch = []
            for feats in (s_list, t_list):
                proj = [self.proj[str(i)](feats[i]) for i in range(4)]
                prop = self.fpn_propagate(proj)
                gathered = [prop[0]] + [upsample_nearest(prop[i], 2 ** i)
                                        for i in (1, 2, 3)]
                branch.append(self.merge_conv(torch.cat(gathered, dim=1)))
            u_s, u_t = branch
            if self.cfg.similarity == "attention":
                fused = self._attend(self.cross["fused"], u_s, u_t)
            else:
                fused = alt_similarity(u_s, u_t, self.cfg.similarity)
            fused = self._self_attend(fused)
        elif fusion == "c2":
            fused = self._self_attend(self.cross_similarity(0, s_list[0], t_list[0]))
        else:  # c5: single coarse scale, brought up to the finest grid
            p5 = self.cross_similarity(3, s_list[3], t_list[3])
            fused = self._self_attend(upsample_nearest(p5, 8))
        return BEVFeature(fused, stride=4)
