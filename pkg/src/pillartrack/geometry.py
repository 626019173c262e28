"""Oriented 3D boxes, rotated BEV IoU and tracking metrics.

Everything here is plain numpy/math on float64 and free of learned state,
so the tracker and the evaluation code can call it from anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# 21 evenly spaced thresholds, both endpoints included. Success sweeps IoU
# on [0, 1], precision sweeps center distance on [0, 2] m. Comparisons are
# strict (iou > t, dist < t) so the convention is fully pinned down.
NUM_AUC_THRESHOLDS = 21
PRECISION_MAX_DIST = 2.0


def normalize_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center (x, y, z), size (w, l, h), yaw about +z.

    w extends along the local x axis and l along the local y axis at yaw 0.
    Yaw is normalized to [-pi, pi) at construction; sizes must be positive.
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.w, self.l, self.h)}")
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def size(self) -> tuple[float, float, float]:
        return (self.w, self.l, self.h)

    def to_array(self) -> np.ndarray:
        """Serialize as the canonical 7-tuple (x, y, z, w, l, h, yaw)."""
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.yaw],
                        dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box3D":
        x, y, z, w, l, h, yaw = (float(v) for v in arr)
        return Box3D(x, y, z, w, l, h, yaw)

    def translated(self, offset) -> "Box3D":
        ox, oy, oz = (float(v) for v in offset)
        return Box3D(self.x + ox, self.y + oy, self.z + oz,
                     self.w, self.l, self.h, self.yaw)

    def enlarged(self, margin: float) -> "Box3D":
        """Grow every side by `margin` meters (per side, i.e. +2*margin per axis)."""
        return Box3D(self.x, self.y, self.z,
                     self.w + 2 * margin, self.l + 2 * margin, self.h + 2 * margin,
                     self.yaw)


def bev_corners(box: Box3D) -> np.ndarray:
    """Four (x, y) corners of the box footprint, counter-clockwise.

    Corner order at yaw 0: (+w/2,+l/2), (-w/2,+l/2), (-w/2,-l/2), (+w/2,-l/2).
    """
    hx, hy = box.w / 2.0, box.l / 2.0
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]], dtype=np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    return local @ rot.T + np.array([box.x, box.y], dtype=np.float64)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as an (n, 2) vertex array (ccw positive)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex ccw polygon `clip`.

    Returns the (possibly empty) intersection polygon. Points exactly on a
    clip edge count as inside, so clipping a polygon by itself is exact.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_list = output
        output = []
        if not input_list:
            break
        prev = input_list[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for curr in input_list:
            curr_side = ex * (curr[1] - ay) - ey * (curr[0] - ax)
            if curr_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - curr_side)
                    output.append((prev[0] + t * (curr[0] - prev[0]),
                                   prev[1] + t * (curr[1] - prev[1])))
                output.append(curr)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - curr_side)
                output.append((prev[0] + t * (curr[0] - prev[0]),
                               prev[1] + t * (curr[1] - prev[1])))
            prev, prev_side = curr, curr_side
    return np.array(output, dtype=np.float64) if output else np.zeros((0, 2))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Overlap area of the two box footprints."""
    inter = clip_polygon(bev_corners(a), bev_corners(b))
    return max(polygon_area(inter), 0.0)


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV polygon overlap times vertical extent overlap over union.

    iou3d(box, box) is exactly 1.0: the intersection reuses the box's own
    corner and extent arithmetic bit for bit.
    """
    za0, za1 = a.z - a.h / 2.0, a.z + a.h / 2.0
    zb0, zb1 = b.z - b.h / 2.0, b.z + b.h / 2.0
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter_area = bev_intersection_area(a, b)
    if inter_area <= 0.0:
        return 0.0
    inter_vol = inter_area * dz
    # volumes go through the same shoelace/extent arithmetic as the overlap
    vol_a = polygon_area(bev_corners(a)) * (za1 - za0)
    vol_b = polygon_area(bev_corners(b)) * (zb1 - zb0)
    union = vol_a + vol_b - inter_vol
    if union <= 0.0:
        return 0.0
    # near-coincident boxes can round the clipped area an ulp past the box
    # area; the ratio stays in [0, 1] by contract
    return min(max(inter_vol / union, 0.0), 1.0)


def center_distance(a: Box3D, b: Box3D) -> float:
    """Euclidean distance between the two box centers."""
    return float(np.linalg.norm(a.center - b.center))


def contains_points(box: Box3D, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of which (n, >=3) points lie inside the box (with slack tol)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    d = pts[:, :3] - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return ((np.abs(lx) <= box.w / 2.0 + tol)
            & (np.abs(ly) <= box.l / 2.0 + tol)
            & (np.abs(d[:, 2]) <= box.h / 2.0 + tol))


def world_to_box_frame(box: Box3D, points: np.ndarray) -> np.ndarray:
    """Express points in the box frame (translate to center, undo yaw).

    Extra columns (intensity, ...) are passed through untouched.
    """
    pts = np.asarray(points, dtype=np.float64).copy()
    if pts.size == 0:
        return pts.reshape(0, pts.shape[1] if pts.ndim == 2 else 4)
    d = pts[:, :3] - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = pts
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    return out


def _auc(values: np.ndarray, thresholds: np.ndarray, hit) -> float:
    rates = [float(np.mean(hit(values, t))) for t in thresholds]
    return 100.0 * float(np.mean(rates))


def success_auc(ious) -> float:
    """Success score: AUC of the fraction of frames with IoU strictly above
    each of 21 thresholds evenly spaced on [0, 1], reported as a percentage."""
    vals = np.asarray(ious, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("success_auc needs at least one IoU value")
    if np.any((vals < 0) | (vals > 1)):
        raise ValueError("IoU values must lie in [0, 1]")
    thr = np.linspace(0.0, 1.0, NUM_AUC_THRESHOLDS)
    return _auc(vals, thr, lambda v, t: v > t)


def precision_auc(distances) -> float:
    """Precision score: AUC of the fraction of frames with center distance
    strictly below each of 21 thresholds evenly spaced on [0, 2] m."""
    vals = np.asarray(distances, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("precision_auc needs at least one distance value")
    if np.any(vals < 0):
        raise ValueError("distances must be nonnegative")
    thr = np.linspace(0.0, PRECISION_MAX_DIST, NUM_AUC_THRESHOLDS)
    return _auc(vals, thr, lambda v, t: v < t)


@dataclass
class TrackScore:
    """Per-sequence OPE result: AUC percentages plus the per-frame raw values."""

    success: float
    precision: float
    ious: list[float] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)

    @staticmethod
    def from_frames(ious, distances) -> "TrackScore":
        if len(ious) != len(distances):
            raise ValueError("ious and distances must have equal length")
        return TrackScore(success=success_auc(ious), precision=precision_auc(distances),
                          ious=[float(v) for v in ious],
                          distances=[float(v) for v in distances])
