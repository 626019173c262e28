"""Siamese frame-by-frame tracking loop and OPE evaluation.

The tracker is initialized from the first frame's ground-truth box. Each
later frame crops a search region around the previous predicted center
(axis-aligned, never yaw-rotated) and a template from earlier frames per
the selected strategy, runs the model, and maps the best prediction back
to world coordinates. Success/Precision are computed over frames 2..N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import pick_best
from .geometry import (
    Box3D,
    TrackScore,
    center_distance,
    contains_points,
    iou3d,
    world_to_box_frame,
)
from .pillars import PointCloud, crop_points

TEMPLATE_STRATEGIES = ("F", "P", "FP", "AP")
DEFAULT_TEMPLATE_MARGIN = 0.25  # meters added per box side before cropping


@dataclass
class Sequence:
    """Ordered (cloud, ground-truth box) frames for one tracked object."""

    frames: list[tuple[PointCloud, Box3D]]
    seq_id: str = "seq0"
    category: str = "Car"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least two frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def clouds(self) -> list[PointCloud]:
        return [c for c, _ in self.frames]

    @property
    def boxes(self) -> list[Box3D]:
        return [b for _, b in self.frames]


@dataclass(frozen=True)
class SearchTransform:
    """Offset between world coordinates and the search-crop frame."""

    center: tuple[float, float, float]

    def to_world(self, box: Box3D) -> Box3D:
        return box.translated(self.center)

    def world_to_crop(self, box: Box3D) -> Box3D:
        cx, cy, cz = self.center
        return box.translated((-cx, -cy, -cz))


def crop_box_frame(pc: PointCloud, box: Box3D, margin: float) -> PointCloud:
    """Points inside the margin-enlarged box, expressed in the box frame."""
    grown = box.enlarged(margin)
    keep = contains_points(grown, pc.points)
    return PointCloud(world_to_box_frame(box, pc.points[keep]))


def crop_template(clouds: list[PointCloud], boxes: list[Box3D], strategy: str,
                  margin: float = DEFAULT_TEMPLATE_MARGIN) -> PointCloud:
    """Template cloud per strategy, rotation-normalized to each source box.

    F: first frame's box only. P: the latest box. FP: both (points kept with
    multiplicity). AP: every box so far. `boxes` are the tracker's previous
    outputs aligned with `clouds`.
    """
    if strategy not in TEMPLATE_STRATEGIES:
        raise ValueError(f"unknown template strategy {strategy!r}")
    if not clouds or len(clouds) != len(boxes):
        raise ValueError("need equally many clouds and boxes, at least one each")
    if strategy == "F":
        picks = [0]
    elif strategy == "P":
        picks = [len(clouds) - 1]
    elif strategy == "FP":
        picks = [0, len(clouds) - 1] if len(clouds) > 1 else [0]
    else:
        picks = list(range(len(clouds)))
    return PointCloud.concat([crop_box_frame(clouds[i], boxes[i], margin)
                              for i in picks])


def crop_search(pc: PointCloud, prev_box: Box3D, area) -> tuple[PointCloud, SearchTransform]:
    """Axis-aligned crop of `area` centered on the previous box center.

    Returns the points translated into the crop frame plus the transform
    that maps predictions back to world coordinates.
    """
    cx, cy, cz = prev_box.x, prev_box.y, prev_box.z
    x0, y0, z0, x1, y1, z1 = area
    shifted_area = (x0 + cx, y0 + cy, z0 + cz, x1 + cx, y1 + cy, z1 + cz)
    cropped = crop_points(pc, shifted_area)
    pts = cropped.points.copy()
    pts[:, 0] -= cx
    pts[:, 1] -= cy
    pts[:, 2] -= cz
    return PointCloud(pts), SearchTransform(center=(cx, cy, cz))


def track_sequence(seq: Sequence, model, strategy: str = "FP",
                   margin: float = DEFAULT_TEMPLATE_MARGIN,
                   seed: int = 0) -> tuple[list[Box3D], TrackScore]:
    """Run the tracker through one sequence and score it.

    `model` must provide predict(search_pc, template_pc, seed) returning a
    PredictionSet in the crop frame, and cfg.search_pillars.area. Frame 1
    is the given ground truth; the score covers frames 2..N.
    """
    clouds, gt_boxes = seq.clouds, seq.boxes
    known_size = gt_boxes[0].size
    area = model.cfg.search_pillars.area

    predicted: list[Box3D] = [gt_boxes[0]]
    ious, distances = [], []
    for t in range(1, len(seq)):
        template = crop_template(clouds[:t], predicted[:t], strategy, margin)
        search, tf = crop_search(clouds[t], predicted[t - 1], area)
        ps = model.predict(search, template, seed=seed + t)
        box = tf.to_world(pick_best(ps, known_size))
        predicted.append(box)
        ious.append(iou3d(box, gt_boxes[t]))
        distances.append(center_distance(box, gt_boxes[t]))
    return predicted, TrackScore.from_frames(ious, distances)


@dataclass
class EvalSummary:
    """Per-category Success/Precision plus the frame-weighted mean."""

    per_category: dict[str, tuple[int, float, float]]
    mean_success: float
    mean_precision: float
    total_frames: int


def evaluate_sequences(seqs: list[Sequence], model, strategy: str = "FP",
                       margin: float = DEFAULT_TEMPLATE_MARGIN,
                       seed: int = 0):
    """Track every sequence; aggregate OPE scores weighted by frame count."""
    results = []
    buckets: dict[str, list[TrackScore]] = {}
    for seq in seqs:
        boxes, score = track_sequence(seq, model, strategy, margin, seed=seed)
        results.append((seq, boxes, score))
        buckets.setdefault(seq.category, []).append(score)

    per_category = {}
    weighted_s = weighted_p = 0.0
    total = 0
    for cat, scores in sorted(buckets.items()):
        ious = [v for s in scores for v in s.ious]
        dists = [v for s in scores for v in s.distances]
        cat_score = TrackScore.from_frames(ious, dists)
        per_category[cat] = (len(ious), cat_score.success, cat_score.precision)
        weighted_s += cat_score.success * len(ious)
        weighted_p += cat_score.precision * len(ious)
        total += len(ious)
    summary = EvalSummary(per_category=per_category,
                          mean_success=weighted_s / total,
                          mean_precision=weighted_p / total,
                          total_frames=total)
    return results, summary
