"""Multi-branch bag-supervised detection with instability measurement and fusion."""

from .geometry import Box, ScoredBox, iou, nms, surrounds
from .initializers import InitSpec, gaussian_init, init_model_params, orthogonal_init
from .metrics import (
    ClassMetricReport,
    GroundTruth,
    average_precision,
    corloc,
    idr_class,
    map_report,
    midr,
)
from .milnet import ForwardTrace, ModelParams, ProposalBag, ScoreMatrix, backward, forward
from .fusion import FusedBox, FusedResult, fused_top_box, scs, top_box
from .refine import PseudoLabelAssignment, RefinementStage, assign_pseudo_labels, refine_loss
from .synthgen import SynthConfig, default_benchmark, easy_config, generate
from .trainer import TrainConfig, TrainingDivergenceError, TrainingLog, sgd_step, train

__all__ = [
    "Box", "ScoredBox", "iou", "nms", "surrounds",
    "InitSpec", "gaussian_init", "init_model_params", "orthogonal_init",
    "ClassMetricReport", "GroundTruth", "average_precision", "corloc",
    "idr_class", "map_report", "midr",
    "ForwardTrace", "ModelParams", "ProposalBag", "ScoreMatrix", "backward", "forward",
    "FusedBox", "FusedResult", "fused_top_box", "scs", "top_box",
    "PseudoLabelAssignment", "RefinementStage", "assign_pseudo_labels", "refine_loss",
    "SynthConfig", "default_benchmark", "easy_config", "generate",
    "TrainConfig", "TrainingDivergenceError", "TrainingLog", "sgd_step", "train",
]

__version__ = "0.1.0"
