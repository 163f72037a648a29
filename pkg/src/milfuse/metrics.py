"""Detection quality and stability metrics.

Covers the inconsistent detection rate between two detectors (IDR and its
class mean mIDR), CorLoc on positive images, and VOC-protocol average
precision with 11-point or all-point interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .geometry import Box, iou

# A detection counts as localizing a ground-truth box when IoU >= 0.5.
MATCH_IOU = 0.5


@dataclass
class ClassMetricReport:
    """Per-class values of one metric plus their arithmetic mean.

    Only classes that were evaluable are listed; absent classes are not
    counted as zero.
    """

    per_class: list[tuple[int, float]]
    mean: float

    @classmethod
    def from_per_class(cls, values: Mapping[int, float]) -> "ClassMetricReport":
        if not values:
            raise ValueError("cannot build a report with no evaluable classes")
        items = sorted(values.items())
        return cls(per_class=items, mean=sum(v for _, v in items) / len(items))

    def value(self, class_id: int) -> float:
        for cid, v in self.per_class:
            if cid == class_id:
                return v
        raise KeyError(class_id)

    def to_csv_text(self) -> str:
        lines = ["class_id,value"]
        lines += [f"{cid},{v}" for cid, v in self.per_class]
        lines.append(f"mean,{self.mean}")
        return "\n".join(lines) + "\n"

    def to_json_text(self) -> str:
        return json.dumps(
            {"per_class": [{"class_id": c, "value": v} for c, v in self.per_class],
             "mean": self.mean},
            indent=2,
        )


@dataclass
class GroundTruth:
    """Evaluation-only ground truth: per image, the (class_id, box) objects."""

    per_image: dict[str, list[tuple[int, Box]]] = field(default_factory=dict)

    def images(self) -> list[str]:
        return list(self.per_image)

    def classes(self) -> list[int]:
        seen = {cid for objs in self.per_image.values() for cid, _ in objs}
        return sorted(seen)

    def positive_images(self, class_id: int) -> list[str]:
        return [img for img, objs in self.per_image.items()
                if any(cid == class_id for cid, _ in objs)]

    def boxes_for(self, image_id: str, class_id: int) -> list[Box]:
        return [b for cid, b in self.per_image.get(image_id, []) if cid == class_id]

    def num_boxes(self, class_id: int) -> int:
        return sum(len(self.boxes_for(img, class_id)) for img in self.per_image)

    def restrict(self, image_ids: Iterable[str]) -> "GroundTruth":
        keep = set(image_ids)
        return GroundTruth({img: objs for img, objs in self.per_image.items() if img in keep})


def idr_class(
    dets_a: Mapping[str, Box],
    dets_b: Mapping[str, Box],
    positives: Sequence[str],
) -> float:
    """Inconsistent detection rate between two detectors on one class.

    Both mappings must give the top-scoring box per positive image; the
    rate is the fraction of positive images where the two boxes overlap
    with IoU strictly below 0.5.
    """
    if not positives:
        raise ValueError("IDR is undefined for a class with no positive images")
    inconsistent = sum(1 for img in positives if iou(dets_a[img], dets_b[img]) < MATCH_IOU)
    return inconsistent / len(positives)


def midr(per_class_idr: Sequence[float]) -> float:
    """Mean IDR over the classes present."""
    if not per_class_idr:
        raise ValueError("mIDR is undefined with no classes")
    return sum(per_class_idr) / len(per_class_idr)


def corloc(
    top_dets: Mapping[str, Mapping[int, Box]],
    gt: GroundTruth,
) -> ClassMetricReport:
    """Correct-localization rate per class.

    For each class, the fraction of positive images whose top box reaches
    IoU >= 0.5 with at least one ground-truth box of that class. Classes
    with no positive images are excluded from the mean.
    """
    values: dict[int, float] = {}
    for class_id in gt.classes():
        positives = gt.positive_images(class_id)
        if not positives:
            continue
        hits = 0
        for img in positives:
            if img not in top_dets or class_id not in top_dets[img]:
                raise ValueError(f"missing top box for positive image {img!r}, class {class_id}")
            top = top_dets[img][class_id]
            if any(iou(top, g) >= MATCH_IOU for g in gt.boxes_for(img, class_id)):
                hits += 1
        values[class_id] = hits / len(positives)
    return ClassMetricReport.from_per_class(values)


def average_precision(
    detections: Sequence[tuple[str, float, Box]],
    gt: GroundTruth,
    class_id: int,
    mode: str = "eleven_point",
) -> float:
    """VOC-protocol average precision for one class.

    Detections are (image_id, score, box) triples. Matching is greedy in
    descending score order: a detection is a true positive when its best
    IoU over the image's ground-truth boxes is >= 0.5 and that box is
    still unmatched; duplicates and sub-threshold overlaps are false
    positives. ``mode`` selects 11-point (VOC2007-style) or all-point
    interpolation.
    """
    if mode not in ("eleven_point", "all_point"):
        raise ValueError(f"unknown AP mode {mode!r}")
    npos = gt.num_boxes(class_id)
    if npos == 0:
        raise ValueError(f"AP is undefined for class {class_id} with no ground truth")

    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    used: dict[str, list[bool]] = {}
    tp = 0
    precisions: list[float] = []
    recalls: list[float] = []
    for rank, i in enumerate(order, start=1):
        image_id, _, box = detections[i]
        gt_boxes = gt.boxes_for(image_id, class_id)
        flags = used.setdefault(image_id, [False] * len(gt_boxes))
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt_boxes):
            v = iou(box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_iou >= MATCH_IOU and not flags[best_j]:
            flags[best_j] = True
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / npos)

    if mode == "eleven_point":
        ap = 0.0
        for t in [i / 10.0 for i in range(11)]:
            ps = [p for p, r in zip(precisions, recalls) if r >= t]
            ap += max(ps) if ps else 0.0
        return ap / 11.0

    # All-point: area under the monotone precision envelope.
    mrec = [0.0] + recalls + [1.0]
    mpre = [0.0] + precisions + [0.0]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return ap


def map_report(
    dets_by_class: Mapping[int, Sequence[tuple[str, float, Box]]],
    gt: GroundTruth,
    mode: str = "eleven_point",
) -> ClassMetricReport:
    """AP per class (classes with ground truth only) and their mean."""
    values = {
        class_id: average_precision(dets_by_class.get(class_id, []), gt, class_id, mode)
        for class_id in gt.classes()
    }
    return ClassMetricReport.from_per_class(values)
