"""Sparse-to-dense encoding: crop, pillarize, and scatter to a BEV grid.

Points are binned into vertical pillars over a fixed area, decorated with
offsets to the pillar mean and the cell center, run through a small
per-point net, max-pooled per pillar, and scattered onto a dense C x H x W
map. BEV maps are laid out with rows indexing y and columns indexing x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

DECORATED_DIM = 10  # x, y, z, intensity, offsets to pillar mean, offsets to cell center


@dataclass
class PointCloud:
    """An (n, 4) float64 array of x, y, z, intensity. Empty clouds are legal."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"expected (n, 4) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 4)))

    @staticmethod
    def concat(clouds) -> "PointCloud":
        arrays = [c.points for c in clouds]
        if not arrays:
            return PointCloud.empty()
        return PointCloud(np.concatenate(arrays, axis=0))


@dataclass(frozen=True)
class PillarConfig:
    """Pillar grid over an axis-aligned area.

    `area` is (x_min, y_min, z_min, x_max, y_max, z_max); `pillar_size`
    is (dx, dy, dz) with dz spanning the full vertical extent, so each
    cell is a single pillar. The x/y extents must be whole multiples of
    dx/dy.
    """

    area: tuple[float, float, float, float, float, float]
    pillar_size: tuple[float, float, float]
    max_points_per_pillar: int = 32
    max_pillars: int = 4096

    def __post_init__(self):
        x0, y0, z0, x1, y1, z1 = self.area
        dx, dy, dz = self.pillar_size
        if not (x1 > x0 and y1 > y0 and z1 > z0):
            raise ValueError(f"degenerate area {self.area}")
        for extent, step, name in (((x1 - x0), dx, "x"), ((y1 - y0), dy, "y")):
            n = extent / step
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"{name} extent {extent} is not a multiple of cell size {step}")
        if abs((z1 - z0) - dz) > 1e-9:
            raise ValueError("dz must span the full z extent (single vertical cell)")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(H, W) = (#cells along y, #cells along x)."""
        x0, y0, _, x1, y1, _ = self.area
        dx, dy, _ = self.pillar_size
        return (int(round((y1 - y0) / dy)), int(round((x1 - x0) / dx)))

    def cell_center(self, row: int, col: int) -> tuple[float, float, float]:
        x0, y0, z0, _, _, z1 = self.area
        dx, dy, _ = self.pillar_size
        return (x0 + (col + 0.5) * dx, y0 + (row + 0.5) * dy, 0.5 * (z0 + z1))


@dataclass
class PillarTensor:
    """Decorated per-pillar point features ready for the feature net.

    features: (P, M, 10); coords: (P, 2) as (row, col); mask: (P, M) with
    masked rows zeroed. grid_shape is carried along for scattering.
    """

    features: np.ndarray
    coords: np.ndarray
    mask: np.ndarray
    grid_shape: tuple[int, int]

    @property
    def num_pillars(self) -> int:
        return self.features.shape[0]


@dataclass
class BEVFeature:
    """A dense (C, H, W) feature map plus its stride w.r.t. the pillar grid."""

    tensor: torch.Tensor
    stride: int = 1

    @property
    def shape(self):
        return tuple(self.tensor.shape)


def crop_points(pc: PointCloud, area) -> PointCloud:
    """Keep the points inside the half-open box [min, max) on every axis."""
    x0, y0, z0, x1, y1, z1 = area
    pts = pc.points
    keep = ((pts[:, 0] >= x0) & (pts[:, 0] < x1)
            & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
            & (pts[:, 2] >= z0) & (pts[:, 2] < z1))
    return PointCloud(pts[keep])


def pillarize(pc: PointCloud, cfg: PillarConfig, seed: int = 0) -> PillarTensor:
    """Bin points into pillars and decorate them.

    Each in-area point lands in exactly one cell via floor indexing.
    Overflow beyond max_points_per_pillar and beyond max_pillars is dropped
    by a seeded random choice, so results are reproducible per (input, seed).
    Decoration: raw (x, y, z, intensity), offsets from the pillar's point
    mean, offsets from the cell center. Offsets use the surviving points.
    """
    x0, y0, z0, x1, y1, z1 = cfg.area
    dx, dy, _ = cfg.pillar_size
    h, w = cfg.grid_shape
    m = cfg.max_points_per_pillar

    pts = crop_points(pc, cfg.area).points
    if len(pts) == 0:
        return PillarTensor(np.zeros((0, m, DECORATED_DIM)),
                            np.zeros((0, 2), dtype=np.int64),
                            np.zeros((0, m), dtype=bool),
                            (h, w))

    cols = np.floor((pts[:, 0] - x0) / dx).astype(np.int64)
    rows = np.floor((pts[:, 1] - y0) / dy).astype(np.int64)
    # guard against floor landing one past the end for points within a few
    # ulp of the max boundary
    cols = np.clip(cols, 0, w - 1)
    rows = np.clip(rows, 0, h - 1)

    flat = rows * w + cols
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    cell_ids, starts = np.unique(flat_sorted, return_index=True)
    groups = np.split(order, starts[1:])

    rng = np.random.default_rng(seed)
    if len(cell_ids) > cfg.max_pillars:
        keep = rng.choice(len(cell_ids), size=cfg.max_pillars, replace=False)
        keep.sort()
        cell_ids = cell_ids[keep]
        groups = [groups[i] for i in keep]

    p = len(cell_ids)
    features = np.zeros((p, m, DECORATED_DIM))
    mask = np.zeros((p, m), dtype=bool)
    coords = np.stack([cell_ids // w, cell_ids % w], axis=1)

    z_center = 0.5 * (z0 + z1)
    for i, (cell, idx) in enumerate(zip(cell_ids, groups)):
        if len(idx) > m:
            idx = idx[rng.choice(len(idx), size=m, replace=False)]
        sel = pts[idx]
        n = len(sel)
        mean_xyz = sel[:, :3].mean(axis=0)
        row, col = divmod(int(cell), w)
        cx = x0 + (col + 0.5) * dx
        cy = y0 + (row + 0.5) * dy
        features[i, :n, 0:4] = sel
        features[i, :n, 4:7] = sel[:, :3] - mean_xyz
        features[i, :n, 7] = sel[:, 0] - cx
        features[i, :n, 8] = sel[:, 1] - cy
        features[i, :n, 9] = sel[:, 2] - z_center
        mask[i, :n] = True

    return PillarTensor(features, coords, mask, (h, w))


class PillarFeatureNet(nn.Module):
    """Per-point affine map + ReLU, masked max over each pillar, scatter to grid."""

    def __init__(self, out_channels: int, in_dim: int = DECORATED_DIM,
                 dtype=torch.float64):
        super().__init__()
        self.out_channels = out_channels
        self.linear = nn.Linear(in_dim, out_channels, dtype=dtype)
        self.dtype = dtype

    def forward(self, pt: PillarTensor) -> BEVFeature:
        h, w = pt.grid_shape
        out = torch.zeros(self.out_channels, h, w, dtype=self.dtype,
                          device=self.linear.weight.device)
        if pt.num_pillars == 0:
            return BEVFeature(out, stride=1)

        feats = torch.as_tensor(pt.features, dtype=self.dtype,
                                device=self.linear.weight.device)
        mask = torch.as_tensor(pt.mask, device=feats.device)

        x = torch.relu(self.linear(feats))            # (P, M, C)
        x = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        pooled = x.max(dim=1).values                  # (P, C)
        # pillars with no surviving point would pool to -inf; zero them
        has_points = mask.any(dim=1)
        pooled = torch.where(has_points.unsqueeze(-1), pooled,
                             torch.zeros_like(pooled))

        rows = torch.as_tensor(pt.coords[:, 0], device=feats.device)
        cols = torch.as_tensor(pt.coords[:, 1], device=feats.device)
        out[:, rows, cols] = pooled.T
        return BEVFeature(out, stride=1)


@dataclass(frozen=True)
class BranchSpec:
    """Pillar grid plus feature-net width for one Siamese branch."""

    pillar: PillarConfig
    channels: int = 16


# Car search area and 0.1 m pillars give a 64 x 64 grid; the template area
# halves every extent symmetrically (32 x 32 grid).
CAR_SEARCH_AREA = (-3.2, -3.2, -3.0, 3.2, 3.2, 1.0)
CAR_SEARCH_PILLARS = PillarConfig(area=CAR_SEARCH_AREA, pillar_size=(0.1, 0.1, 4.0))
CAR_TEMPLATE_AREA = (-1.6, -1.6, -1.0, 1.6, 1.6, 1.0)
CAR_TEMPLATE_PILLARS = PillarConfig(area=CAR_TEMPLATE_AREA, pillar_size=(0.1, 0.1, 2.0))
