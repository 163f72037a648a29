"""Seeded synthetic bag generator with planted part/whole structure.

Each image gets a few ground-truth objects. Every object contributes one
"whole" proposal (a jittered box still overlapping the object at IoU >=
0.7), several "part" proposals strictly inside the object covering 10-40%
of its area, and some background boxes. Features are a planted linear
model: every class owns one whole-signature axis plus ``part_types``
distinct part-signature axes (think head vs. tail of the same animal);
a whole proposal carries its class's whole axis, a part carries one of
the class's part axes, and all proposals share a per-image context axis
plus isotropic Gaussian noise. The full vector is multiplied by
``feature_scale``, which sets the effective step size of downstream
gradient training.

Because the class's axes are equally valid evidence for bag-level
classification, a bag-trained detector can converge onto any of them,
and which one it picks depends on its initialization. Part signal
strength can exceed whole signal (optionally ramped across classes), so
classes range from stable whole-pickers to unstable part-pickers. With
``part_types=0`` parts reuse the whole axis and only magnitudes differ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Box
from .metrics import GroundTruth
from .milnet import ProposalBag

# Whole boxes expand each side by at most this fraction, which keeps their
# IoU with the ground-truth box at 1/1.16^2 ~ 0.74 or better.
_WHOLE_JITTER_FRAC = 0.08


@dataclass
class SynthConfig:
    """Knobs of the generator; all randomness flows from ``seed``."""

    num_classes: int = 6
    feature_len: int = 32
    images: int = 286
    objects_per_image: tuple[int, int] = (1, 3)
    parts_per_object: int = 2
    part_types: int = 2
    backgrounds_per_object: int = 2
    whole_signal: float = 1.0
    part_signal: float = 1.2
    part_signal_min: float | None = 0.7
    noise_std: float = 0.2
    feature_scale: float = 6.0
    canvas: tuple[float, float] = (100.0, 100.0)
    object_size: tuple[float, float] = (20.0, 55.0)
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.images < 1:
            raise ValueError("num_classes and images must be at least 1")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValueError("objects_per_image must be a non-empty range from >= 1")
        if self.parts_per_object < 1 or self.backgrounds_per_object < 0:
            raise ValueError("need at least one part proposal per object")
        if self.part_types < 0:
            raise ValueError("part_types must be non-negative")
        if self.feature_len < self.num_signal_axes + 1:
            raise ValueError(
                f"feature_len must cover {self.num_signal_axes} signature axes "
                "plus the context axis")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")
        if not self.feature_scale > 0.0:
            raise ValueError("feature_scale must be positive")
        if self.object_size[0] <= 0.0 or self.object_size[1] < self.object_size[0]:
            raise ValueError("object_size must be a positive (min, max) range")
        if self.object_size[1] > min(self.canvas):
            raise ValueError(
                f"objects up to {self.object_size[1]} cannot fit a canvas of {self.canvas}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")

    @property
    def num_signal_axes(self) -> int:
        return self.num_classes * (1 + self.part_types)

    def whole_axis(self, class_id: int) -> int:
        return class_id * (1 + self.part_types)

    def part_axis(self, class_id: int, part_type: int) -> int:
        if self.part_types == 0:
            return self.whole_axis(class_id)
        return class_id * (1 + self.part_types) + 1 + (part_type % self.part_types)

    @property
    def context_axis(self) -> int:
        return self.num_signal_axes

    def part_signal_for(self, class_id: int) -> float:
        """Per-class part signal: constant, or ramped from the min up."""
        if self.part_signal_min is None or self.num_classes == 1:
            return self.part_signal
        t = class_id / (self.num_classes - 1)
        return self.part_signal_min + t * (self.part_signal - self.part_signal_min)


def default_benchmark() -> SynthConfig:
    """The pinned benchmark used by the experiment suite."""
    return SynthConfig()


def easy_config() -> SynthConfig:
    """Noise-free, whole-signal-dominant data: localization is separable.

    Parts share their class's whole axis at a lower magnitude, so any
    scorer that ranks by class evidence puts the whole box on top.
    """
    return SynthConfig(noise_std=0.0, part_types=0, part_signal=0.7, part_signal_min=None)


def _whole_box(gt: Box, canvas: tuple[float, float], rng: np.random.Generator) -> Box:
    dx1, dx2 = rng.uniform(0.0, _WHOLE_JITTER_FRAC * gt.width, size=2)
    dy1, dy2 = rng.uniform(0.0, _WHOLE_JITTER_FRAC * gt.height, size=2)
    return Box(
        max(0.0, gt.x1 - dx1),
        max(0.0, gt.y1 - dy1),
        min(canvas[0], gt.x2 + dx2),
        min(canvas[1], gt.y2 + dy2),
    )


def _part_box(gt: Box, rng: np.random.Generator) -> Box:
    area_frac = rng.uniform(0.1, 0.4)
    aspect = rng.uniform(0.8, 1.25)
    pw = gt.width * np.sqrt(area_frac) * aspect
    ph = gt.height * np.sqrt(area_frac) / aspect
    # Strictly interior placement on all four sides.
    u, v = rng.uniform(0.02, 0.98, size=2)
    x1 = gt.x1 + u * (gt.width - pw)
    y1 = gt.y1 + v * (gt.height - ph)
    return Box(x1, y1, x1 + pw, y1 + ph)


def _background_box(config: SynthConfig, rng: np.random.Generator) -> Box:
    w = rng.uniform(*config.object_size)
    h = rng.uniform(*config.object_size)
    x1 = rng.uniform(0.0, config.canvas[0] - w)
    y1 = rng.uniform(0.0, config.canvas[1] - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _feature(
    config: SynthConfig,
    rng: np.random.Generator,
    ctx_value: float,
    signal_axis: int | None,
    signal: float,
) -> np.ndarray:
    f = np.zeros(config.feature_len)
    if signal_axis is not None:
        f[signal_axis] = signal
    f[config.context_axis] = ctx_value
    if config.noise_std > 0.0:
        f += rng.normal(0.0, config.noise_std, size=config.feature_len)
    return f * config.feature_scale


def _generate_image(config: SynthConfig, image_id: str, rng: np.random.Generator) -> ProposalBag:
    ctx_value = rng.uniform(0.5, 1.5)
    n_objects = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
    gt_objects: list[tuple[int, Box]] = []
    boxes: list[Box] = []
    features: list[np.ndarray] = []
    for _ in range(n_objects):
        class_id = int(rng.integers(config.num_classes))
        w = rng.uniform(*config.object_size)
        h = rng.uniform(*config.object_size)
        x1 = rng.uniform(0.0, config.canvas[0] - w)
        y1 = rng.uniform(0.0, config.canvas[1] - h)
        gt_box = Box(x1, y1, x1 + w, y1 + h)
        gt_objects.append((class_id, gt_box))

        boxes.append(_whole_box(gt_box, config.canvas, rng))
        features.append(_feature(config, rng, ctx_value,
                                 config.whole_axis(class_id), config.whole_signal))
        part_signal = config.part_signal_for(class_id)
        for part_index in range(config.parts_per_object):
            boxes.append(_part_box(gt_box, rng))
            features.append(_feature(config, rng, ctx_value,
                                     config.part_axis(class_id, part_index), part_signal))
        for _ in range(config.backgrounds_per_object):
            boxes.append(_background_box(config, rng))
            features.append(_feature(config, rng, ctx_value, None, 0.0))

    labels = np.zeros(config.num_classes, dtype=np.int64)
    for class_id, _ in gt_objects:
        labels[class_id] = 1
    return ProposalBag(
        image_id=image_id,
        labels=labels,
        boxes=boxes,
        features=np.stack(features),
        gt=gt_objects,
    )


def generate(config: SynthConfig) -> tuple[list[ProposalBag], list[ProposalBag], GroundTruth]:
    """Produce (train bags, test bags, ground truth over all images).

    Fully deterministic per seed: every image draws from its own derived
    seed, and the train/test split is a seeded 70/30 permutation.
    """
    root = np.random.SeedSequence(config.seed)
    image_root, split_root = root.spawn(2)
    bags = [
        _generate_image(config, f"img_{i:04d}", np.random.default_rng(child))
        for i, child in enumerate(image_root.spawn(config.images))
    ]
    split_rng = np.random.default_rng(split_root)
    order = split_rng.permutation(config.images)
    n_train = int(round(config.train_fraction * config.images))
    train = [bags[i] for i in sorted(order[:n_train])]
    test = [bags[i] for i in sorted(order[n_train:])]
    gt = GroundTruth({bag.image_id: list(bag.gt) for bag in bags})
    return train, test, gt


def write_jsonl(bags: Iterable[ProposalBag], path: str | Path) -> None:
    """One image per line: labels, proposals with features, ground truth."""
    with open(path, "w") as handle:
        for bag in bags:
            doc = {
                "image_id": bag.image_id,
                "labels": bag.labels.tolist(),
                "proposals": [
                    {"box": list(box.as_tuple()), "feature": feature.tolist()}
                    for box, feature in zip(bag.boxes, bag.features)
                ],
                "gt": [{"class_id": cid, "box": list(b.as_tuple())}
                       for cid, b in (bag.gt or [])],
            }
            handle.write(json.dumps(doc) + "\n")


def read_jsonl(path: str | Path) -> tuple[list[ProposalBag], GroundTruth]:
    bags: list[ProposalBag] = []
    per_image: dict[str, list[tuple[int, Box]]] = {}
    with open(path) as handle:
        for line in handle:
            doc = json.loads(line)
            gt_objects = [(int(o["class_id"]), Box(*o["box"])) for o in doc["gt"]]
            bags.append(ProposalBag(
                image_id=doc["image_id"],
                labels=np.array(doc["labels"], dtype=np.int64),
                boxes=[Box(*p["box"]) for p in doc["proposals"]],
                features=np.array([p["feature"] for p in doc["proposals"]], dtype=np.float64),
                gt=gt_objects,
            ))
            per_image[doc["image_id"]] = gt_objects
    return bags, GroundTruth(per_image)
