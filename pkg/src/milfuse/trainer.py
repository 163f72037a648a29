"""Momentum-SGD training loop binding the network, fusion, and refinement.

Every step forwards all branches on the batch, fuses the branches' top
boxes online, supervises the refinement cascade with the fused pseudo
labels, and applies one momentum update with coupled L2 weight decay.
Training is bit-deterministic given (dataset, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import milnet, refine
from .fusion import scs
from .geometry import ScoredBox
from .initializers import InitSpec, init_model_params
from .milnet import ModelParams, ProposalBag, params_map, params_zeros_like


class TrainingDivergenceError(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    """Optimizer and schedule knobs.

    The learning rate holds at ``lr_initial`` for ``epochs_phase1``
    epochs, then drops by ``lr_drop_factor`` for ``epochs_phase2`` more.
    """

    lr_initial: float = 5e-4
    lr_drop_factor: float = 0.1
    epochs_phase1: int = 10
    epochs_phase2: int = 5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 2
    seed: int = 0
    k_branches: int = 3
    refine_stages: int = 3
    refine_loss_weight: float = 1.0
    init: InitSpec = field(default_factory=InitSpec)

    def __post_init__(self) -> None:
        if not self.lr_initial > 0.0:
            raise ValueError("lr_initial must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.k_branches < 1 or self.refine_stages < 0:
            raise ValueError("need k_branches >= 1 and refine_stages >= 0")

    @property
    def total_epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2

    def lr_at(self, epoch: int) -> float:
        if epoch < self.epochs_phase1:
            return self.lr_initial
        return self.lr_initial * self.lr_drop_factor


@dataclass
class EpochStats:
    epoch: int
    loss: float
    midr: float | None = None
    corloc: float | None = None
    map_value: float | None = None


@dataclass
class TrainingLog:
    rows: list[EpochStats] = field(default_factory=list)

    def to_csv_text(self) -> str:
        def cell(v: float | None) -> str:
            return "" if v is None else str(v)

        lines = ["epoch,loss,midr,corloc,map"]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.loss},{cell(r.midr)},{cell(r.corloc)},{cell(r.map_value)}")
        return "\n".join(lines) + "\n"


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    velocity: ModelParams,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[ModelParams, ModelParams]:
    """One momentum update with L2 decay folded into the gradient.

    velocity <- momentum * velocity + grad + weight_decay * weight
    weight   <- weight - lr * velocity
    """
    new_velocity = params_map(
        lambda w, g, v: momentum * v + g + weight_decay * w, params, grads, velocity)
    new_params = params_map(lambda w, v: w - lr * v, params, new_velocity)
    return new_params, new_velocity


def _bag_gradients(
    bag: ProposalBag,
    params: ModelParams,
    config: TrainConfig,
) -> tuple[float, ModelParams]:
    """Loss and gradients for one bag: branch losses plus refinement."""
    trace = milnet.forward(bag, params)
    loss = trace.total
    grads = milnet.backward(bag, params, trace)

    if params.num_refine_stages >= 1:
        fused = scs(trace.coupled, bag.boxes, bag.labels)
        seeds: list[ScoredBox] = [
            ScoredBox(fb.box, class_id, fb.score) for class_id, fb in fused.all_survivors()
        ]
        for j, stage in enumerate(refine.stages_from_params(params)):
            assignment = refine.assign_pseudo_labels(seeds, bag.boxes, params.num_classes)
            stage_loss, grad_w, grad_b = refine.refine_loss(stage, bag.features, assignment)
            loss += config.refine_loss_weight * stage_loss
            grads.refine_w[j] += config.refine_loss_weight * grad_w
            grads.refine_b[j] += config.refine_loss_weight * grad_b
            probs = refine.stage_softmax(stage, bag.features)
            seeds = refine.seeds_from_stage(probs, bag.boxes, bag.labels)
    return loss, grads


def _check_finite(loss: float, grads: ModelParams, where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss} at {where}")
    for arr in grads.arrays():
        if not np.isfinite(arr).all():
            raise TrainingDivergenceError(f"non-finite gradient at {where}")


def train(
    bags: Sequence[ProposalBag],
    config: TrainConfig,
) -> tuple[ModelParams, TrainingLog]:
    """Train a fresh model on the bags; returns final params and the log.

    The log records the mean per-bag loss of every epoch. Bags' ``gt``
    fields are never read here.
    """
    if not bags:
        raise ValueError("cannot train on an empty bag set")
    feature_len = bags[0].feature_len
    num_classes = bags[0].num_classes
    for bag in bags:
        if bag.feature_len != feature_len or bag.num_classes != num_classes:
            raise ValueError("all bags must share feature length and class count")

    params = init_params_for(config, feature_len, num_classes)
    velocity = params_zeros_like(params)
    shuffle_rng = np.random.default_rng(config.seed)
    log = TrainingLog()

    for epoch in range(config.total_epochs):
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(len(bags))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            batch_grads = params_zeros_like(params)
            for i in batch:
                loss, grads = _bag_gradients(bags[int(i)], params, config)
                _check_finite(loss, grads, f"epoch {epoch}, bag {bags[int(i)].image_id}")
                batch_grads = params_map(lambda a, b: a + b, batch_grads, grads)
                epoch_loss += loss
            batch_grads = params_map(lambda a: a / len(batch), batch_grads)
            params, velocity = sgd_step(
                params, batch_grads, velocity, lr, config.momentum, config.weight_decay)
        log.rows.append(EpochStats(epoch=epoch, loss=epoch_loss / len(bags)))
    return params, log


def init_params_for(config: TrainConfig, feature_len: int, num_classes: int) -> ModelParams:
    return init_model_params(
        feature_len, num_classes, config.k_branches, config.refine_stages, config.init)
