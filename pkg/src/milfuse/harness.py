"""Experiment runners: instability study, fusion-gain curve, branch/init
ablation, and end-to-end train+evaluate.

Every runner is reproducible bit-for-bit from (config, seed): run seeds
are derived from the master seed per purpose, independent runs may fan
out over processes (MILFUSE_JOBS), and report assembly is sequential.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import refine
from .fusion import fused_top_box, scs
from .geometry import Box
from .initializers import STRATEGY_GAUSSIAN, STRATEGY_ORTHOGONAL
from .metrics import ClassMetricReport, GroundTruth, corloc, idr_class, map_report, midr
from .milnet import KIND_COUPLED, ModelParams, ProposalBag, ScoreMatrix
from .synthgen import SynthConfig, default_benchmark, read_jsonl, write_jsonl
from .trainer import TrainConfig, TrainingLog, train

JOBS_ENV_VAR = "MILFUSE_JOBS"

EXPERIMENTS = ("instability", "fusion_curve", "ablation", "train_eval")


@dataclass
class ExperimentConfig:
    """One experiment: which study to run, on which data, with which trainer."""

    experiment: str = "train_eval"
    synth: SynthConfig = field(default_factory=default_benchmark)
    dataset: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    repetitions: int = 10
    samplings: int = 10
    k_max: int = 5
    seed: int = 0
    out_dir: str = "runs/experiment"

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; pick one of {EXPERIMENTS}")
        if self.repetitions < 1 or self.samplings < 1 or self.k_max < 1:
            raise ValueError("repetitions, samplings, and k_max must be at least 1")
        if self.experiment == "instability" and self.repetitions < 2:
            raise ValueError("instability needs repetitions >= 2 (pairs of detectors)")


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _synth_from_dict(doc: Mapping) -> SynthConfig:
    kwargs = dict(doc)
    for key in ("objects_per_image", "canvas", "object_size"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SynthConfig(**kwargs)


def _train_from_dict(doc: Mapping) -> TrainConfig:
    from .initializers import InitSpec

    kwargs = dict(doc)
    if "init" in kwargs:
        kwargs["init"] = InitSpec(**kwargs["init"])
    return TrainConfig(**kwargs)


def experiment_config_from_dict(doc: Mapping) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON document."""
    kwargs = dict(doc)
    if "synth" in kwargs:
        kwargs["synth"] = _synth_from_dict(kwargs["synth"])
    if "train" in kwargs:
        kwargs["train"] = _train_from_dict(kwargs["train"])
    return ExperimentConfig(**kwargs)


def derive_seeds(master: int, purpose: str, count: int) -> list[int]:
    """Named, order-stable seed streams off one master seed."""
    tag = zlib.crc32(purpose.encode())
    rng = np.random.default_rng(np.random.SeedSequence([master & (2**63 - 1), tag]))
    return [int(s) for s in rng.integers(0, 2**63, size=count)]


def load_dataset(config: ExperimentConfig) -> tuple[list[ProposalBag], list[ProposalBag], GroundTruth]:
    """Either read train/test JSONL from the dataset directory or generate."""
    if config.dataset is not None:
        root = Path(config.dataset)
        train_bags, gt_train = read_jsonl(root / "train.jsonl")
        test_bags, gt_test = read_jsonl(root / "test.jsonl")
        gt = GroundTruth({**gt_train.per_image, **gt_test.per_image})
        return train_bags, test_bags, gt
    from .synthgen import generate

    return generate(config.synth)


def _jobs() -> int:
    return max(1, int(os.environ.get(JOBS_ENV_VAR, "1")))


def _train_worker(task: tuple[Sequence[ProposalBag], TrainConfig]) -> tuple[ModelParams, TrainingLog]:
    bags, cfg = task
    return train(bags, cfg)


def train_runs(
    bags: Sequence[ProposalBag],
    configs: Sequence[TrainConfig],
) -> list[tuple[ModelParams, TrainingLog]]:
    """Train one model per config; parallel when MILFUSE_JOBS > 1."""
    tasks = [(bags, cfg) for cfg in configs]
    jobs = _jobs()
    if jobs == 1 or len(tasks) == 1:
        return [_train_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_train_worker, tasks, chunksize=1))


def pool_configs(base: TrainConfig, count: int, master_seed: int) -> list[TrainConfig]:
    """Per-run configs for a pool of single-branch detectors (no refinement)."""
    run_seeds = derive_seeds(master_seed, "pool-train", count)
    init_seeds = derive_seeds(master_seed, "pool-init", count)
    return [
        replace(base, k_branches=1, refine_stages=0, seed=run_seeds[i],
                init=replace(base.init, strategy=STRATEGY_GAUSSIAN, seed=init_seeds[i]))
        for i in range(count)
    ]


def detector_top_boxes(
    params: ModelParams, bags: Sequence[ProposalBag]
) -> dict[str, dict[int, Box]]:
    """Per image, the top final-score box of each positive class."""
    return {
        bag.image_id: {c: sb.box for c, sb in refine.top_detections(params, bag).items()}
        for bag in bags
    }


def detector_score_maps(
    params: ModelParams, bags: Sequence[ProposalBag]
) -> dict[str, ScoreMatrix]:
    """Per image, the detector's final score matrix, usable as a fusion input."""
    return {
        bag.image_id: ScoreMatrix(refine.final_scores(params, bag.features), KIND_COUPLED)
        for bag in bags
    }


def _distinct_pairs(n: int, count: int, seed: int) -> list[tuple[int, int]]:
    all_pairs = list(itertools.combinations(range(n), 2))
    if len(all_pairs) <= count:
        return all_pairs
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(all_pairs), size=count, replace=False)
    return [all_pairs[i] for i in sorted(picks)]


def _distinct_subsets(n: int, k: int, count: int, seed: int) -> list[tuple[int, ...]]:
    total = math.comb(n, k)
    if total <= count:
        return list(itertools.combinations(range(n), k))
    rng = np.random.default_rng(seed)
    subsets: set[tuple[int, ...]] = set()
    while len(subsets) < count:
        subsets.add(tuple(sorted(rng.permutation(n)[:k].tolist())))
    return sorted(subsets)


def averaged_idr_per_class(
    per_detector_tops: Sequence[Mapping[str, Mapping[int, Box]]],
    gt: GroundTruth,
    pairs: Sequence[tuple[int, int]],
) -> dict[int, float]:
    """IDR per class, averaged over the sampled detector pairs."""
    values: dict[int, float] = {}
    for class_id in gt.classes():
        positives = gt.positive_images(class_id)
        if not positives:
            continue
        rates = []
        for a, b in pairs:
            dets_a = {img: per_detector_tops[a][img][class_id] for img in positives}
            dets_b = {img: per_detector_tops[b][img][class_id] for img in positives}
            rates.append(idr_class(dets_a, dets_b, positives))
        values[class_id] = sum(rates) / len(rates)
    return values


def averaged_corloc_per_class(
    per_detector_tops: Sequence[Mapping[str, Mapping[int, Box]]],
    gt: GroundTruth,
) -> dict[int, float]:
    reports = [corloc(tops, gt) for tops in per_detector_tops]
    classes = [cid for cid, _ in reports[0].per_class]
    return {
        cid: sum(rep.value(cid) for rep in reports) / len(reports)
        for cid in classes
    }


@dataclass
class InstabilityReport:
    per_class_idr: dict[int, float]
    per_class_corloc: dict[int, float]
    midr: float
    spearman_idr_corloc: float
    num_detectors: int
    num_pairs: int
    config_hash: str

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["class_id,idr,corloc"]
        for cid in sorted(self.per_class_idr):
            lines.append(f"{cid},{self.per_class_idr[cid]},{self.per_class_corloc[cid]}")
        (out / "instability_per_class.csv").write_text("\n".join(lines) + "\n")
        (out / "report.json").write_text(json.dumps({
            "experiment": "instability",
            "config_hash": self.config_hash,
            "midr": self.midr,
            "spearman_idr_corloc": self.spearman_idr_corloc,
            "num_detectors": self.num_detectors,
            "num_pairs": self.num_pairs,
        }, indent=2))


def instability_from_top_boxes(
    per_detector_tops: Sequence[Mapping[str, Mapping[int, Box]]],
    gt: GroundTruth,
    num_pairs: int,
    pair_seed: int,
    hash_value: str = "",
) -> InstabilityReport:
    """Stability analysis of already-extracted detector outputs."""
    if len(per_detector_tops) < 2:
        raise ValueError("instability analysis needs at least two detectors")
    pairs = _distinct_pairs(len(per_detector_tops), num_pairs, pair_seed)
    idr_values = averaged_idr_per_class(per_detector_tops, gt, pairs)
    corloc_values = averaged_corloc_per_class(per_detector_tops, gt)
    classes = sorted(idr_values)
    rho = spearmanr([idr_values[c] for c in classes],
                    [corloc_values[c] for c in classes]).statistic
    return InstabilityReport(
        per_class_idr=idr_values,
        per_class_corloc=corloc_values,
        midr=midr([idr_values[c] for c in classes]),
        spearman_idr_corloc=float(rho),
        num_detectors=len(per_detector_tops),
        num_pairs=len(pairs),
        config_hash=hash_value,
    )


def run_instability(config: ExperimentConfig) -> InstabilityReport:
    """Train a pool of single-branch detectors and measure their disagreement."""
    if config.repetitions < 2:
        raise ValueError("instability needs repetitions >= 2")
    train_bags, _, gt = load_dataset(config)
    gt_train = gt.restrict(bag.image_id for bag in train_bags)
    runs = train_runs(train_bags, pool_configs(config.train, config.repetitions, config.seed))
    tops = [detector_top_boxes(params, train_bags) for params, _ in runs]
    report = instability_from_top_boxes(
        tops, gt_train, config.samplings,
        derive_seeds(config.seed, "idr-pairs", 1)[0], config_hash(config))
    report.write(config.out_dir)
    return report


@dataclass
class FusionCurvePoint:
    k: int
    corloc: float
    midr: float


@dataclass
class FusionCurveReport:
    points: list[FusionCurvePoint]
    config_hash: str

    def point(self, k: int) -> FusionCurvePoint:
        for p in self.points:
            if p.k == k:
                return p
        raise KeyError(k)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["k,corloc,midr"]
        lines += [f"{p.k},{p.corloc},{p.midr}" for p in self.points]
        (out / "fusion_curve.csv").write_text("\n".join(lines) + "\n")
        (out / "report.json").write_text(json.dumps({
            "experiment": "fusion_curve",
            "config_hash": self.config_hash,
            "points": [asdict(p) for p in self.points],
        }, indent=2))


def fused_top_boxes_for_subset(
    score_maps: Sequence[Mapping[str, ScoreMatrix]],
    subset: Sequence[int],
    bags: Sequence[ProposalBag],
) -> dict[str, dict[int, Box]]:
    """Fuse a subset of detectors image by image and keep each class's top."""
    tops: dict[str, dict[int, Box]] = {}
    for bag in bags:
        fused = scs([score_maps[d][bag.image_id] for d in subset], bag.boxes, bag.labels)
        tops[bag.image_id] = {
            c: fused_top_box(fused, c).box for c in fused.classes()
        }
    return tops


def fusion_curve_from_score_maps(
    score_maps: Sequence[Mapping[str, ScoreMatrix]],
    bags: Sequence[ProposalBag],
    gt: GroundTruth,
    k_max: int,
    samplings: int,
    seed: int,
    hash_value: str = "",
) -> FusionCurveReport:
    if len(score_maps) < k_max:
        raise ValueError(
            f"need at least k_max={k_max} detectors in the pool, got {len(score_maps)}")
    points = []
    for k in range(1, k_max + 1):
        subsets = _distinct_subsets(
            len(score_maps), k, samplings, derive_seeds(seed, f"subsets-k{k}", 1)[0])
        fused_tops = [fused_top_boxes_for_subset(score_maps, s, bags) for s in subsets]
        corloc_mean = float(np.mean([corloc(tops, gt).mean for tops in fused_tops]))
        pairs = _distinct_pairs(
            len(fused_tops), samplings, derive_seeds(seed, f"fused-pairs-k{k}", 1)[0])
        if pairs:
            idr_values = averaged_idr_per_class(fused_tops, gt, pairs)
            midr_mean = midr(list(idr_values.values()))
        else:
            midr_mean = 0.0
        points.append(FusionCurvePoint(k=k, corloc=corloc_mean, midr=midr_mean))
    return FusionCurveReport(points=points, config_hash=hash_value)


def run_fusion_curve(config: ExperimentConfig) -> FusionCurveReport:
    """Fuse growing detector subsets and track CorLoc and consistency."""
    if config.repetitions < config.k_max:
        raise ValueError("repetitions (pool size) must reach k_max")
    train_bags, _, gt = load_dataset(config)
    gt_train = gt.restrict(bag.image_id for bag in train_bags)
    runs = train_runs(train_bags, pool_configs(config.train, config.repetitions, config.seed))
    score_maps = [detector_score_maps(params, train_bags) for params, _ in runs]
    report = fusion_curve_from_score_maps(
        score_maps, train_bags, gt_train, config.k_max, config.samplings,
        config.seed, config_hash(config))
    report.write(config.out_dir)
    return report


@dataclass
class AblationCell:
    k: int
    init: str
    seed: int
    map_value: float
    corloc: float


@dataclass
class AblationReport:
    cells: list[AblationCell]
    config_hash: str

    def mean_map(self, k: int, init: str) -> float:
        vals = [c.map_value for c in self.cells if c.k == k and c.init == init]
        if not vals:
            raise KeyError((k, init))
        return sum(vals) / len(vals)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["k,init,seed,map,corloc"]
        lines += [f"{c.k},{c.init},{c.seed},{c.map_value},{c.corloc}" for c in self.cells]
        (out / "ablation_runs.csv").write_text("\n".join(lines) + "\n")

        summary = ["k,init,map_mean,map_std,corloc_mean,corloc_std"]
        for k in sorted({c.k for c in self.cells}):
            for init in (STRATEGY_ORTHOGONAL, STRATEGY_GAUSSIAN):
                cell_vals = [c for c in self.cells if c.k == k and c.init == init]
                if not cell_vals:
                    continue
                maps = np.array([c.map_value for c in cell_vals])
                cors = np.array([c.corloc for c in cell_vals])
                summary.append(
                    f"{k},{init},{maps.mean()},{maps.std()},{cors.mean()},{cors.std()}")
        (out / "ablation_summary.csv").write_text("\n".join(summary) + "\n")
        (out / "report.json").write_text(json.dumps({
            "experiment": "ablation",
            "config_hash": self.config_hash,
            "cells": [asdict(c) for c in self.cells],
        }, indent=2))


def evaluate_model(
    params: ModelParams,
    train_bags: Sequence[ProposalBag],
    test_bags: Sequence[ProposalBag],
    gt: GroundTruth,
) -> tuple[ClassMetricReport, ClassMetricReport, dict[int, list[tuple[str, float, Box]]]]:
    """(CorLoc on the train split, AP on the test split, test detections)."""
    tops = detector_top_boxes(params, train_bags)
    corloc_report = corloc(tops, gt.restrict(bag.image_id for bag in train_bags))

    dets_by_class: dict[int, list[tuple[str, float, Box]]] = {}
    for bag in test_bags:
        per_class = refine.inference_scores(params, bag.features, bag.boxes)
        for class_id, scored in per_class.items():
            dets_by_class.setdefault(class_id, []).extend(
                (bag.image_id, sb.score, sb.box) for sb in scored)
    ap_report = map_report(dets_by_class, gt.restrict(bag.image_id for bag in test_bags))
    return corloc_report, ap_report, dets_by_class


def ablation_cell_configs(
    base: TrainConfig, k: int, init_strategy: str, seeds: Sequence[tuple[int, int]]
) -> list[TrainConfig]:
    return [
        replace(base, k_branches=k, seed=run_seed,
                init=replace(base.init, strategy=init_strategy, seed=init_seed))
        for run_seed, init_seed in seeds
    ]


def run_ablation(config: ExperimentConfig) -> AblationReport:
    """Grid over branch count x init strategy, multiple seeds per cell."""
    train_bags, test_bags, gt = load_dataset(config)
    grid = [(k, strategy)
            for k in range(1, config.k_max + 1)
            for strategy in (STRATEGY_ORTHOGONAL, STRATEGY_GAUSSIAN)]
    run_seeds = derive_seeds(config.seed, "ablation-train", config.repetitions)
    init_seeds = derive_seeds(config.seed, "ablation-init", config.repetitions)
    seeds = list(zip(run_seeds, init_seeds))

    configs: list[TrainConfig] = []
    labels: list[tuple[int, str, int]] = []
    for k, strategy in grid:
        configs.extend(ablation_cell_configs(config.train, k, strategy, seeds))
        labels.extend((k, strategy, i) for i in range(config.repetitions))

    results = train_runs(train_bags, configs)
    cells = []
    for (k, strategy, rep), (params, _) in zip(labels, results):
        corloc_report, ap_report, _ = evaluate_model(params, train_bags, test_bags, gt)
        cells.append(AblationCell(
            k=k, init=strategy, seed=rep,
            map_value=ap_report.mean, corloc=corloc_report.mean))
    report = AblationReport(cells=cells, config_hash=config_hash(config))
    report.write(config.out_dir)
    return report


@dataclass
class TrainEvalReport:
    corloc_mean: float
    map_mean: float
    config_hash: str
    out_dir: str

    def write_files(
        self,
        params: ModelParams,
        log: TrainingLog,
        corloc_report: ClassMetricReport,
        ap_report: ClassMetricReport,
        dets_by_class: Mapping[int, Sequence[tuple[str, float, Box]]],
        config: ExperimentConfig,
    ) -> None:
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        params.save(out / "params.json")
        (out / "training_log.csv").write_text(log.to_csv_text())
        (out / "corloc_per_class.csv").write_text(corloc_report.to_csv_text())
        (out / "ap_per_class.csv").write_text(ap_report.to_csv_text())

        by_image: dict[str, dict[int, list[tuple[str, float, Box]]]] = {}
        for class_id in sorted(dets_by_class):
            for image_id, score, box in dets_by_class[class_id]:
                by_image.setdefault(image_id, {}).setdefault(class_id, []).append(
                    (image_id, score, box))
        lines = []
        for image_id in sorted(by_image):
            for class_id in sorted(by_image[image_id]):
                dets = by_image[image_id][class_id]
                lines.append(json.dumps({
                    "image_id": image_id,
                    "class_id": class_id,
                    "boxes": [{"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "score": s}
                              for _, s, b in dets],
                }))
        (out / "detections.jsonl").write_text("\n".join(lines) + "\n")
        (out / "report.json").write_text(json.dumps({
            "experiment": "train_eval",
            "config": asdict(config),
            "config_hash": self.config_hash,
            "corloc_mean": self.corloc_mean,
            "map_mean": self.map_mean,
        }, indent=2, sort_keys=True))


def run_train_eval(config: ExperimentConfig) -> TrainEvalReport:
    """Train the full model once, evaluate, and write every artifact."""
    train_bags, test_bags, gt = load_dataset(config)
    params, log = train(train_bags, config.train)
    corloc_report, ap_report, dets = evaluate_model(params, train_bags, test_bags, gt)
    report = TrainEvalReport(
        corloc_mean=corloc_report.mean,
        map_mean=ap_report.mean,
        config_hash=config_hash(config),
        out_dir=config.out_dir,
    )
    report.write_files(params, log, corloc_report, ap_report, dets, config)
    return report
