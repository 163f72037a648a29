"""Cascaded instance-classifier refinement supervised by fusion output.

Each stage is a linear (C+1)-way classifier over proposals, class C being
background. Stage 1 takes the fusion survivors as seed boxes; every later
stage is seeded by the previous stage's per-class top boxes. A proposal
inherits the class of its highest-IoU seed when that IoU reaches 0.5,
weighted by the seed's score; otherwise it is background with weight 1.
Seeds are treated as constants, so no gradient flows into how they were
picked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, ScoredBox, iou, nms
from .milnet import (
    ModelParams,
    ProposalBag,
    couple,
    forward_cls,
    forward_det,
    softmax_over_classes,
)

SEED_MATCH_IOU = 0.5
FINAL_NMS_THRESHOLD = 0.3
BACKGROUND_WEIGHT = 1.0


@dataclass
class RefinementStage:
    """One stage's weights: (l, C+1) matrix plus (C+1,) bias."""

    index: int
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class PseudoLabelAssignment:
    """Per-proposal supervision: a class label (C = background) and a weight."""

    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.labels.shape != self.weights.shape or self.labels.ndim != 1:
            raise ValueError("labels and weights must be aligned 1-D arrays")


def stages_from_params(params: ModelParams) -> list[RefinementStage]:
    return [RefinementStage(j, w, b)
            for j, (w, b) in enumerate(zip(params.refine_w, params.refine_b))]


def stage_softmax(stage: RefinementStage, features: np.ndarray) -> np.ndarray:
    """(C+1 x N) class distribution per proposal for one stage."""
    logits = (features @ stage.weights + stage.bias).T
    return softmax_over_classes(logits)


def assign_pseudo_labels(
    seeds: Sequence[ScoredBox],
    boxes: Sequence[Box],
    num_classes: int,
) -> PseudoLabelAssignment:
    """Label every proposal from the seed boxes.

    The highest-IoU seed wins a proposal; ties go to the lower class index
    (then higher score). A proposal whose best IoU is below 0.5, or any
    proposal when there are no seeds, is background.
    """
    ordered = sorted(seeds, key=lambda s: (s.class_id, -s.score, s.box.as_tuple()))
    n = len(boxes)
    labels = np.full(n, num_classes, dtype=np.int64)
    weights = np.full(n, BACKGROUND_WEIGHT, dtype=np.float64)
    for i, box in enumerate(boxes):
        best_iou = 0.0
        best: ScoredBox | None = None
        for seed in ordered:
            v = iou(seed.box, box)
            if v > best_iou:
                best_iou, best = v, seed
        if best is not None and best_iou >= SEED_MATCH_IOU:
            labels[i] = best.class_id
            weights[i] = best.score
    return PseudoLabelAssignment(labels, weights)


def refine_loss(
    stage: RefinementStage,
    features: np.ndarray,
    assignment: PseudoLabelAssignment,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted cross-entropy of one stage plus its analytic gradients.

    Loss is the mean over proposals of weight * (-log softmax[label]),
    computed through a log-sum-exp so saturated logits stay finite.
    Returns (loss, grad_weights, grad_bias).
    """
    n = features.shape[0]
    if assignment.labels.shape[0] != n:
        raise ValueError("assignment must cover every proposal")
    logits = (features @ stage.weights + stage.bias).T  # (C+1, N)
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    probs = np.exp(log_probs)

    idx = np.arange(n)
    loss = float(-(assignment.weights * log_probs[assignment.labels, idx]).sum() / n)

    d_logits = probs * (assignment.weights / n)
    d_logits[assignment.labels, idx] -= assignment.weights / n
    grad_w = features.T @ d_logits.T
    grad_b = d_logits.sum(axis=1)
    return loss, grad_w, grad_b


def seeds_from_stage(
    stage_probs: np.ndarray,
    boxes: Sequence[Box],
    labels: np.ndarray | Sequence[int],
) -> list[ScoredBox]:
    """Per positive class, the stage's top-scoring proposal as next seed."""
    labels = np.asarray(labels)
    seeds = []
    for class_id in range(len(labels)):
        if labels[class_id] != 1:
            continue
        n = int(np.argmax(stage_probs[class_id]))
        seeds.append(ScoredBox(boxes[n], class_id, float(stage_probs[class_id, n])))
    return seeds


def final_scores(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Test-time (C x N) score matrix.

    Mean foreground softmax over the refinement stages; with no stages it
    falls back to the mean of the coupled branch scores.
    """
    num_classes = params.num_classes
    if params.num_refine_stages >= 1:
        stacked = [stage_softmax(stage, features)[:num_classes]
                   for stage in stages_from_params(params)]
    else:
        cls_sm = forward_cls(features, params)
        stacked = [couple(cls_sm, forward_det(features, params, k)).values
                   for k in range(params.num_branches)]
    return np.mean(stacked, axis=0)


def inference_scores(
    params: ModelParams,
    features: np.ndarray,
    boxes: Sequence[Box],
) -> dict[int, list[ScoredBox]]:
    """Final per-class detections for one image, after NMS at 0.3."""
    scores = final_scores(params, features)
    detections: dict[int, list[ScoredBox]] = {}
    for class_id in range(params.num_classes):
        scored = [ScoredBox(box, class_id, float(scores[class_id, n]))
                  for n, box in enumerate(boxes)]
        detections[class_id] = nms(scored, FINAL_NMS_THRESHOLD)
    return detections


def top_detections(params: ModelParams, bag: ProposalBag) -> dict[int, ScoredBox]:
    """Top-scoring box per positive class of one bag (for CorLoc/IDR use)."""
    scores = final_scores(params, bag.features)
    tops: dict[int, ScoredBox] = {}
    for class_id in range(bag.num_classes):
        if bag.labels[class_id] != 1:
            continue
        n = int(np.argmax(scores[class_id]))
        tops[class_id] = ScoredBox(bag.boxes[n], class_id, float(scores[class_id, n]))
    return tops
