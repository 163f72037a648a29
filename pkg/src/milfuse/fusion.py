"""Surrounded-candidates suppression: fusing the branches' top boxes.

Per positive class, every branch nominates its top-scoring box. A
nominated box that is properly contained inside another nominee is very
likely an object part, so it is discarded; the remainder go through a
tight NMS. Containment removal is evaluated simultaneously against the
original nominee set, which makes the outcome independent of branch
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, ScoredBox, nms, surrounds
from .milnet import ScoreMatrix

SCS_NMS_THRESHOLD = 0.1


@dataclass(frozen=True)
class FusedBox:
    """A fusion survivor: the box, its coupled score, and the source branch."""

    box: Box
    score: float
    branch: int


@dataclass
class FusedResult:
    """Fusion survivors grouped per positive class."""

    per_class: dict[int, list[FusedBox]]

    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def all_survivors(self) -> list[tuple[int, FusedBox]]:
        return [(c, fb) for c in self.classes() for fb in self.per_class[c]]


def top_box(coupled: ScoreMatrix, boxes: Sequence[Box], class_id: int) -> ScoredBox:
    """The proposal with maximal coupled score for one class.

    Ties are broken by the lowest proposal index.
    """
    row = coupled.values[class_id]
    n = int(np.argmax(row))
    return ScoredBox(boxes[n], class_id, float(row[n]))


def scs(
    branch_scores: Sequence[ScoreMatrix],
    boxes: Sequence[Box],
    labels: np.ndarray | Sequence[int],
) -> FusedResult:
    """Fuse the branches' top boxes for every positive class.

    Identical boxes nominated by several branches collapse to one entry
    carrying the maximum score (branch ties go to the lower index). Every
    entry surrounded by another original entry is removed, then NMS at
    threshold 0.1 runs over what remains, ordered by score with a
    coordinate tie-break so the result does not depend on branch order.
    """
    if len(branch_scores) < 1:
        raise ValueError("fusion needs at least one branch")
    labels = np.asarray(labels)
    per_class: dict[int, list[FusedBox]] = {}
    for class_id in range(len(labels)):
        if labels[class_id] != 1:
            continue
        nominees: dict[Box, FusedBox] = {}
        for k, sm in enumerate(branch_scores):
            pick = top_box(sm, boxes, class_id)
            prev = nominees.get(pick.box)
            if prev is None or pick.score > prev.score:
                nominees[pick.box] = FusedBox(pick.box, pick.score, k)
        entries = list(nominees.values())
        kept = [e for e in entries
                if not any(surrounds(other.box, e.box) for other in entries)]
        kept.sort(key=lambda e: (-e.score, e.box.as_tuple(), e.branch))
        by_box = {e.box: e for e in kept}
        survivors = nms([ScoredBox(e.box, class_id, e.score) for e in kept],
                        SCS_NMS_THRESHOLD)
        per_class[class_id] = [by_box[sb.box] for sb in survivors]
    return FusedResult(per_class)


def fused_top_box(fused: FusedResult, class_id: int) -> ScoredBox:
    """The highest-scoring fusion survivor of one class."""
    survivors = fused.per_class.get(class_id)
    if not survivors:
        raise ValueError(f"no fusion survivors for class {class_id}")
    best = survivors[0]  # survivors are NMS output, already score-descending
    return ScoredBox(best.box, class_id, best.score)


def result_json_lines(image_id: str, fused: FusedResult) -> list[str]:
    """Serialize one image's fusion result, one JSON line per class."""
    lines = []
    for class_id in fused.classes():
        doc = {
            "image_id": image_id,
            "class_id": class_id,
            "boxes": [
                {"x1": fb.box.x1, "y1": fb.box.y1, "x2": fb.box.x2, "y2": fb.box.y2,
                 "score": fb.score, "branch": fb.branch}
                for fb in fused.per_class[class_id]
            ],
        }
        lines.append(json.dumps(doc))
    return lines
