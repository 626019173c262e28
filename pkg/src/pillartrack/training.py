"""Set-prediction training: label augmentation, matching, loss, updates.

Single-object tracking gives one ground-truth box per frame; to get more
positives the box state is replicated across every foreground BEV cell
(cells at the fused-feature stride containing at least one in-box point).
Predictions are matched one-to-one against the replicated labels by the
Hungarian algorithm on a class+L1 cost, matched predictions train toward
class 1 and the box state, unmatched ones toward background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .geometry import Box3D, contains_points
from .model import TrackNet
from .pillars import PillarConfig, PillarTensor, PointCloud, crop_points, pillarize
from .tracker import DEFAULT_TEMPLATE_MARGIN, Sequence, crop_search, crop_template


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class LabelSet:
    """Replicated ground truth: one (x, y, z, sin, cos) row per foreground cell."""

    states: np.ndarray          # (n_fg, 5), all rows identical
    cells: np.ndarray           # (n_fg, 2) as (row, col) at the label stride
    n_fg: int

    def states_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.states, dtype=dtype)


@dataclass(frozen=True)
class LossWeights:
    ce: float = 2.0
    l1: float = 5.0

    def __post_init__(self):
        if self.ce < 0 or self.l1 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ce == 0 and self.l1 == 0:
            raise ValueError("at least one loss weight must be positive")


def box_state(box: Box3D) -> np.ndarray:
    return np.array([box.x, box.y, box.z, math.sin(box.yaw), math.cos(box.yaw)])


def augment_labels(pc: PointCloud, gt: Box3D, pillar_cfg: PillarConfig,
                   stride: int = 4, tol: float = 1e-6) -> LabelSet:
    """One label entry per occupied foreground cell at the given stride.

    A cell counts as foreground when at least one point inside `gt` (and
    inside the pillar area) falls into it. With no such point the cell under
    the box center is used instead, so every frame stays trainable.
    """
    h, w = pillar_cfg.grid_shape
    hc, wc = h // stride, w // stride
    x0, y0 = pillar_cfg.area[0], pillar_cfg.area[1]
    dx = pillar_cfg.pillar_size[0] * stride
    dy = pillar_cfg.pillar_size[1] * stride

    pts = crop_points(pc, pillar_cfg.area).points
    pts = pts[contains_points(gt, pts, tol=tol)]
    if len(pts) > 0:
        cols = np.clip(np.floor((pts[:, 0] - x0) / dx).astype(int), 0, wc - 1)
        rows = np.clip(np.floor((pts[:, 1] - y0) / dy).astype(int), 0, hc - 1)
        cells = np.unique(np.stack([rows, cols], axis=1), axis=0)
    else:
        col = int(np.clip(np.floor((gt.x - x0) / dx), 0, wc - 1))
        row = int(np.clip(np.floor((gt.y - y0) / dy), 0, hc - 1))
        cells = np.array([[row, col]])

    n_fg = len(cells)
    states = np.tile(box_state(gt), (n_fg, 1))
    return LabelSet(states=states, cells=cells, n_fg=n_fg)


def match(logits: torch.Tensor, boxes: torch.Tensor, labels: LabelSet,
          weights: LossWeights = LossWeights()):
    """Hungarian assignment of predictions to label entries.

    Cost per pair: ce_weight * (-prob of class 1) + l1_weight * |b - b_gt|_1.
    Returns (pred_idx, label_idx) with min(k, n_fg) pairs; computed without
    gradients — the assignment is a constant of each step.
    """
    with torch.no_grad():
        prob_fg = torch.softmax(logits, dim=-1)[:, 1]
        states = labels.states_tensor(dtype=boxes.dtype)
        cost_ce = -prob_fg.unsqueeze(1).expand(-1, labels.n_fg)
        cost_l1 = torch.cdist(boxes, states, p=1)
        cost = weights.ce * cost_ce + weights.l1 * cost_l1
    if not torch.all(torch.isfinite(cost)):
        raise TrainingDiverged("non-finite matching cost; model outputs contain "
                               "nan or inf")
    pred_idx, label_idx = linear_sum_assignment(cost.numpy())
    return pred_idx, label_idx


def set_loss(logits: torch.Tensor, boxes: torch.Tensor, labels: LabelSet,
             assignment, weights: LossWeights = LossWeights()):
    """Weighted CE over all predictions plus L1 over the matched boxes.

    CE is averaged over the k predictions (matched rows target class 1,
    the rest class 0); L1 is the per-pair 5-dim absolute error averaged
    over matched pairs.
    """
    pred_idx, label_idx = assignment
    k = logits.shape[0]
    targets = torch.zeros(k, dtype=torch.long)
    targets[torch.as_tensor(pred_idx, dtype=torch.long)] = 1
    ce = F.cross_entropy(logits, targets, reduction="mean")

    states = labels.states_tensor(dtype=boxes.dtype)
    matched = boxes[torch.as_tensor(pred_idx, dtype=torch.long)]
    target_states = states[torch.as_tensor(label_idx, dtype=torch.long)]
    l1 = (matched - target_states).abs().sum(dim=-1).mean()

    total = weights.ce * ce + weights.l1 * l1
    return total, {"cls": float(ce.detach()), "l1": float(l1.detach())}


def dense_stage_one_loss(logits: torch.Tensor, boxes: torch.Tensor,
                         labels: LabelSet, grid_shape,
                         weights: LossWeights = LossWeights()):
    """Alternative stage-one supervision: foreground cells are positives."""
    hc, wc = grid_shape
    flat = labels.cells[:, 0] * wc + labels.cells[:, 1]
    targets = torch.zeros(logits.shape[0], dtype=torch.long)
    targets[torch.as_tensor(flat, dtype=torch.long)] = 1
    ce = F.cross_entropy(logits, targets, reduction="mean")
    states = labels.states_tensor(dtype=boxes.dtype)
    l1 = (boxes[torch.as_tensor(flat, dtype=torch.long)] - states).abs().sum(dim=-1).mean()
    total = weights.ce * ce + weights.l1 * l1
    return total, {"cls": float(ce.detach()), "l1": float(l1.detach())}


def compute_assignments(output, labels: LabelSet, sample: int,
                        weights: LossWeights = LossWeights(),
                        stage_one_dense: bool = False):
    """Hungarian assignments for one batch element, final stage and stage one.

    Kept separate from the loss so callers (and the finite-difference
    oracle) can treat the assignment as a constant of the step.
    """
    final = match(output.logits[sample], output.boxes[sample], labels, weights)
    s1 = None
    if output.stage_one is not None and not stage_one_dense:
        s1 = match(output.stage_one.logits[sample],
                   output.stage_one.boxes[sample], labels, weights)
    return final, s1


def sample_loss(output, labels: LabelSet, sample: int,
                weights: LossWeights = LossWeights(),
                stage_one_dense: bool = False, assignments=None):
    """Loss for one batch element: final stage plus (if present) stage one."""
    if assignments is None:
        assignments = compute_assignments(output, labels, sample, weights,
                                          stage_one_dense)
    final_assign, s1_assign = assignments
    logits, boxes = output.logits[sample], output.boxes[sample]
    total, parts = set_loss(logits, boxes, labels, final_assign, weights)
    if output.stage_one is not None:
        s1 = output.stage_one
        s1_logits, s1_boxes = s1.logits[sample], s1.boxes[sample]
        if stage_one_dense:
            s1_total, s1_parts = dense_stage_one_loss(
                s1_logits, s1_boxes, labels, s1.grid_shape, weights)
        else:
            s1_total, s1_parts = set_loss(s1_logits, s1_boxes, labels,
                                          s1_assign, weights)
        total = total + s1_total
        parts = {k: parts[k] + s1_parts[k] for k in parts}
    return total, parts


@dataclass
class TrainingSample:
    """Pre-pillarized (search, template) pair with its replicated labels."""

    search: PillarTensor
    template: PillarTensor
    labels: LabelSet


def build_training_samples(seqs: list[Sequence], model_cfg, strategy: str = "FP",
                           margin: float = DEFAULT_TEMPLATE_MARGIN,
                           seed: int = 0, jitter_xy: float = 0.1,
                           jitter_yaw: float = 0.05,
                           stride: int = 4) -> list[TrainingSample]:
    """Frame pairs from ground-truth history, with a jittered search center.

    The reference box (previous frame's ground truth) is perturbed to mimic
    tracking drift before the search crop is taken.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for seq in seqs:
        clouds, boxes = seq.clouds, seq.boxes
        for t in range(1, len(seq)):
            ref = boxes[t - 1]
            if jitter_xy > 0 or jitter_yaw > 0:
                ref = Box3D(ref.x + rng.normal(0, jitter_xy),
                            ref.y + rng.normal(0, jitter_xy),
                            ref.z, ref.w, ref.l, ref.h,
                            ref.yaw + rng.normal(0, jitter_yaw))
            search_pc, tf = crop_search(clouds[t], ref, model_cfg.search_pillars.area)
            gt_crop = tf.world_to_crop(boxes[t])
            labels = augment_labels(search_pc, gt_crop, model_cfg.search_pillars,
                                    stride=stride)
            template_pc = crop_template(clouds[:t], boxes[:t], strategy, margin)
            samples.append(TrainingSample(
                search=pillarize(search_pc, model_cfg.search_pillars,
                                 seed=int(rng.integers(2 ** 31))),
                template=pillarize(template_pc, model_cfg.template_pillars,
                                   seed=int(rng.integers(2 ** 31))),
                labels=labels,
            ))
    return samples


def make_optimizer(model: TrackNet, lr: float = 1e-4, weight_decay: float = 0.05):
    """Decoupled-weight-decay adaptive-moment optimizer, the training default."""
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def batch_loss(model: TrackNet, batch: list[TrainingSample],
               weights: LossWeights = LossWeights(),
               stage_one_dense: bool = False, assignments=None,
               proposal_index=None):
    """Mean loss over a batch.

    `assignments` and `proposal_index` (if given) pin the step's discrete
    choices, which the gradient oracle needs; training leaves them live.
    """
    output = model.forward_pillars([s.search for s in batch],
                                   [s.template for s in batch],
                                   proposal_index=proposal_index)
    total = 0.0
    parts_sum = {"cls": 0.0, "l1": 0.0}
    for i, sample in enumerate(batch):
        fixed = assignments[i] if assignments is not None else None
        loss, parts = sample_loss(output, sample.labels, i, weights,
                                  stage_one_dense, assignments=fixed)
        total = total + loss
        for key in parts_sum:
            parts_sum[key] += parts[key]
    n = len(batch)
    return total / n, {k: v / n for k, v in parts_sum.items()}


def train_step(model: TrackNet, batch: list[TrainingSample], optimizer,
               weights: LossWeights = LossWeights(),
               stage_one_dense: bool = False) -> dict:
    """One optimizer update; raises TrainingDiverged on a non-finite loss."""
    optimizer.zero_grad(set_to_none=True)
    loss, parts = batch_loss(model, batch, weights, stage_one_dense)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} (cls={parts['cls']}, l1={parts['l1']})")
    loss.backward()
    optimizer.step()
    return {"loss": value, **parts}


def run_training(model: TrackNet, samples: list[TrainingSample], *,
                 steps: int, batch_size: int = 8, lr: float = 1e-4,
                 weight_decay: float = 0.05, milestones=(), gamma: float = 0.1,
                 weights: LossWeights = LossWeights(), seed: int = 0,
                 stage_one_dense: bool = False,
                 start_step: int = 0, optimizer=None,
                 on_step=None) -> tuple[list[dict], torch.optim.Optimizer]:
    """Seeded mini-batch loop; returns one metrics record per step.

    Batches are drawn by a seeded shuffle over the sample list, re-shuffled
    every epoch, so two runs with the same seed produce identical metrics.
    """
    if not samples:
        raise ValueError("no training samples")
    if optimizer is None:
        optimizer = make_optimizer(model, lr=lr, weight_decay=weight_decay)
    for group in optimizer.param_groups:
        group.setdefault("initial_lr", group["lr"])
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=sorted(milestones), gamma=gamma,
        last_epoch=start_step - 1)

    rng = np.random.default_rng(seed)
    order = []
    metrics = []
    for step in range(start_step, start_step + steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(len(samples)).tolist())
        picks, order = order[:batch_size], order[batch_size:]
        batch = [samples[i] for i in picks]
        record = train_step(model, batch, optimizer, weights, stage_one_dense)
        record.update(step=step, lr=optimizer.param_groups[0]["lr"])
        scheduler.step()
        metrics.append(record)
        if on_step is not None:
            on_step(record)
    return metrics, optimizer
