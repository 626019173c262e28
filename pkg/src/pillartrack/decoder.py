"""Two-stage set prediction over the fused BEV feature.

Stage one puts a score and a box on every spatial location of the fused
map, regressing x/y as metric offsets from the location's cell center
(z, sin-yaw and cos-yaw are absolute). The top-k locations seed target
queries: their boxes enter through a sine/cosine coordinate embedding,
get concatenated with the location features and projected. The queries
then cross-attend over the selected features and two parallel heads emit
the final (box, score) set. A one-stage variant with randomly initialized
queries attending over the whole map sits behind ``two_stage=False``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import nn

from .attention import AttentionBlock, init_transformer_weights
from .geometry import Box3D
from .pillars import BEVFeature, PillarConfig


@dataclass(frozen=True)
class DecoderConfig:
    k: int = 64
    heads: int = 8
    depth: int = 1
    ffn_hidden: int | None = None
    two_stage: bool = True
    freq_bands: int = 8
    pos_scale: float = 4.0  # meters; normalizes coordinates in the query embedding

    def with_overrides(self, **kwargs) -> "DecoderConfig":
        return replace(self, **kwargs)


@dataclass
class StageOneOutput:
    """Dense per-location predictions. Boxes are absolute (x, y, z, sin, cos)."""

    logits: torch.Tensor  # (B, n_loc, 2)
    boxes: torch.Tensor   # (B, n_loc, 5)
    grid_shape: tuple[int, int]

    @property
    def scores(self) -> torch.Tensor:
        return self.logits[..., 1] - self.logits[..., 0]


@dataclass
class PredictionSet:
    """One sample's k predictions: boxes (k, 5) and two-class logits (k, 2)."""

    boxes: torch.Tensor
    logits: torch.Tensor

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def scores(self) -> torch.Tensor:
        return self.logits[:, 1] - self.logits[:, 0]


@dataclass
class DecoderOutput:
    stage_one: StageOneOutput | None
    proposals: torch.Tensor | None       # (B, k, 5) selected stage-one boxes
    proposal_index: torch.Tensor | None  # (B, k) flat location indices
    logits: torch.Tensor                 # (B, k, 2)
    boxes: torch.Tensor                  # (B, k, 5) absolute

    def prediction_set(self, sample: int = 0) -> PredictionSet:
        return PredictionSet(boxes=self.boxes[sample], logits=self.logits[sample])


def select_topk(scores: torch.Tensor, k: int, *tensors: torch.Tensor):
    """Pick the k best rows by score; ties resolve to the smaller index.

    scores: (B, n). Every extra tensor is gathered along dim 1 with the same
    indices. Returns (indices, gathered...).
    """
    n = scores.shape[1]
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available locations")
    order = torch.argsort(scores, dim=1, descending=True, stable=True)
    idx = order[:, :k]
    gathered = []
    for t in tensors:
        expand = idx.unsqueeze(-1).expand(*idx.shape, t.shape[-1])
        gathered.append(torch.gather(t, 1, expand))
    return (idx, *gathered)


def sinusoidal_coordinate_embedding(coords: torch.Tensor, bands: int,
                                    scale: float) -> torch.Tensor:
    """Embed (..., c) coordinates as sin/cos over doubling frequencies.

    Band j contributes sin(2^j * pi * v / scale) and cos(...); the origin
    maps to (sin, cos) = (0, 1) in every band.
    """
    freqs = (2.0 ** torch.arange(bands, dtype=coords.dtype,
                                 device=coords.device)) * math.pi / scale
    ang = coords.unsqueeze(-1) * freqs                      # (..., c, bands)
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb.flatten(-2)                                  # (..., c * 2 * bands)


def yaw_from_sincos(sin_t: float, cos_t: float) -> float:
    return math.atan2(sin_t, cos_t)


def pick_best(ps: PredictionSet, known_size: tuple[float, float, float]) -> Box3D:
    """Highest-scoring prediction as a full box with the known target size."""
    if len(ps) == 0:
        raise ValueError("empty prediction set")
    best = int(torch.argmax(ps.scores).item())
    x, y, z, sin_t, cos_t = (float(v) for v in ps.boxes[best])
    w, l, h = known_size
    return Box3D(x, y, z, w, l, h, yaw_from_sincos(sin_t, cos_t))


class SetDecoder(nn.Module):
    def __init__(self, width: int, cfg: DecoderConfig,
                 search_pillars: PillarConfig, stride: int = 4,
                 dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.width = width
        self.stride = stride
        self.dtype = dtype

        h, w = search_pillars.grid_shape
        if h % stride or w % stride:
            raise ValueError(f"pillar grid {h}x{w} not divisible by stride {stride}")
        self.grid_shape = (h // stride, w // stride)
        x0, y0, z0, _, _, z1 = search_pillars.area
        dx, dy, _ = search_pillars.pillar_size
        rows = torch.arange(self.grid_shape[0], dtype=dtype)
        cols = torch.arange(self.grid_shape[1], dtype=dtype)
        cy = y0 + (rows + 0.5) * dy * stride
        cx = x0 + (cols + 0.5) * dx * stride
        centers = torch.stack(torch.meshgrid(cy, cx, indexing="ij"), dim=-1)
        # (n_loc, 2) as (x, y), row-major over the grid
        self.register_buffer("cell_centers",
                             centers.reshape(-1, 2).flip(-1).contiguous())

        self.score_head_1 = nn.Linear(width, 2, dtype=dtype)
        self.box_head_1 = nn.Linear(width, 5, dtype=dtype)

        embed_dim = 3 * 2 * cfg.freq_bands
        self.query_proj = nn.Linear(width + embed_dim, width, dtype=dtype)
        if not cfg.two_stage:
            self.query_embed = nn.Parameter(
                torch.randn(cfg.k, width, dtype=dtype) * 0.02)
        self.blocks = nn.ModuleList([
            AttentionBlock(width, cfg.heads, cfg.ffn_hidden or width, dtype=dtype)
            for _ in range(cfg.depth)
        ])
        self.score_head_2 = nn.Linear(width, 2, dtype=dtype)
        self.box_head_2 = nn.Linear(width, 5, dtype=dtype)
        init_transformer_weights(self)

    def _tokens(self, fused: BEVFeature) -> torch.Tensor:
        t = fused.tensor
        if t.ndim == 3:
            t = t.unsqueeze(0)
        b, c, h, w = t.shape
        if (h, w) != self.grid_shape:
            raise ValueError(f"fused map {h}x{w} does not match decoder grid "
                             f"{self.grid_shape}")
        return t.flatten(2).transpose(1, 2)  # (B, n_loc, C)

    def stage_one(self, fused: BEVFeature) -> StageOneOutput:
        tokens = self._tokens(fused)
        logits = self.score_head_1(tokens)
        raw = self.box_head_1(tokens)
        centers = self.cell_centers.unsqueeze(0)
        boxes = torch.cat([raw[..., :2] + centers, raw[..., 2:]], dim=-1)
        return StageOneOutput(logits=logits, boxes=boxes, grid_shape=self.grid_shape)

    def make_queries(self, proposals: torch.Tensor,
                     features: torch.Tensor) -> torch.Tensor:
        """Project (box embedding, feature) pairs to query width."""
        emb = sinusoidal_coordinate_embedding(proposals[..., :3],
                                              self.cfg.freq_bands,
                                              self.cfg.pos_scale)
        return self.query_proj(torch.cat([features, emb], dim=-1))

    def decode(self, queries: torch.Tensor, memory: torch.Tensor,
               proposals: torch.Tensor | None):
        """Cross-attend queries over memory and emit the final (box, score) set."""
        t = queries
        for block in self.blocks:
            t = block(t, memory, memory)
        logits = self.score_head_2(t)
        raw = self.box_head_2(t)
        if proposals is not None:
            boxes = torch.cat([raw[..., :3] + proposals[..., :3], raw[..., 3:]],
                              dim=-1)
        else:
            boxes = raw
        return logits, boxes

    def forward(self, fused: BEVFeature,
                proposal_index: torch.Tensor | None = None) -> DecoderOutput:
        """`proposal_index` (B, k) bypasses top-k with a fixed selection,
        which keeps the forward differentiable at score ties (the live path
        recomputes the selection every call)."""
        tokens = self._tokens(fused)
        b = tokens.shape[0]
        if self.cfg.two_stage:
            s1 = self.stage_one(fused)
            if proposal_index is None:
                idx, proposals, selected = select_topk(
                    s1.scores, self.cfg.k, s1.boxes, tokens)
            else:
                idx = proposal_index
                expand_b = idx.unsqueeze(-1).expand(*idx.shape, 5)
                proposals = torch.gather(s1.boxes, 1, expand_b)
                expand_t = idx.unsqueeze(-1).expand(*idx.shape, tokens.shape[-1])
                selected = torch.gather(tokens, 1, expand_t)
            queries = self.make_queries(proposals, selected)
            logits, boxes = self.decode(queries, selected, proposals)
            return DecoderOutput(stage_one=s1, proposals=proposals,
                                 proposal_index=idx, logits=logits, boxes=boxes)
        queries = self.query_embed.unsqueeze(0).expand(b, -1, -1)
        logits, boxes = self.decode(queries, tokens, None)
        return DecoderOutput(stage_one=None, proposals=None, proposal_index=None,
                             logits=logits, boxes=boxes)
