"""Multi-branch scoring network over bags of proposal features.

A bag is one image: precomputed feature vectors for its candidate boxes
plus an image-level binary label per class. A single classification
stream applies a softmax across classes for every proposal; each of K
detection streams applies a softmax across proposals for every class.
The element-wise product of the two streams gives a branch's detection
scores; summing those over proposals yields image-level class
probabilities, trained with per-branch binary cross-entropy whose sum is
the total loss. Gradients are computed analytically; there is no autodiff
framework underneath.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import Box

# Image-level probabilities are clamped to [EPS, 1-EPS] before any log.
P_CLAMP_EPS = 1e-10
# Softmax outputs must be column-/row-stochastic to this tolerance.
STOCHASTIC_ATOL = 1e-9

KIND_LOGITS_CLS = "logits_cls"
KIND_LOGITS_DET = "logits_det"
KIND_SOFTMAX_CLS = "softmax_cls"
KIND_SOFTMAX_DET = "softmax_det"
KIND_COUPLED = "coupled"

PARAMS_FORMAT_VERSION = 1


@dataclass
class ProposalBag:
    """One image's candidate boxes, their features, and image-level labels.

    ``features`` has shape (num_proposals, feature_len); ``labels`` is a
    binary vector over classes. ``gt`` is carried only for evaluation and
    must never be read by training code.
    """

    image_id: str
    labels: np.ndarray
    boxes: list[Box]
    features: np.ndarray
    gt: list[tuple[int, Box]] | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be a 1-D binary vector")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        if self.features.ndim != 2:
            raise ValueError("features must have shape (num_proposals, feature_len)")
        if len(self.boxes) != self.features.shape[0]:
            raise ValueError("one feature vector per proposal box is required")
        if self.num_proposals < 1:
            raise ValueError("a bag needs at least one proposal")
        if self.feature_len < 1:
            raise ValueError("feature vectors must be non-empty")

    @property
    def num_proposals(self) -> int:
        return self.features.shape[0]

    @property
    def feature_len(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[0]


@dataclass
class ModelParams:
    """All trainable arrays: shared classification stream, K detection
    streams, and R optional refinement stages.

    The same structure is reused for gradients and optimizer velocity,
    since those mirror the parameters entry for entry.
    """

    cls_w: np.ndarray
    cls_b: np.ndarray
    det_w: list[np.ndarray]
    det_b: list[np.ndarray]
    refine_w: list[np.ndarray] = field(default_factory=list)
    refine_b: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.cls_w = np.asarray(self.cls_w, dtype=np.float64)
        self.cls_b = np.asarray(self.cls_b, dtype=np.float64)
        self.det_w = [np.asarray(w, dtype=np.float64) for w in self.det_w]
        self.det_b = [np.asarray(b, dtype=np.float64) for b in self.det_b]
        self.refine_w = [np.asarray(w, dtype=np.float64) for w in self.refine_w]
        self.refine_b = [np.asarray(b, dtype=np.float64) for b in self.refine_b]

        if self.cls_w.ndim != 2 or self.cls_b.shape != (self.cls_w.shape[1],):
            raise ValueError("classification weights must be (l, C) with a C-vector bias")
        l, C = self.cls_w.shape
        if len(self.det_w) < 1 or len(self.det_w) != len(self.det_b):
            raise ValueError("at least one detection branch is required")
        for w, b in zip(self.det_w, self.det_b):
            if w.shape != (l, C) or b.shape != (C,):
                raise ValueError("every detection branch must be (l, C) with a C-vector bias")
        if len(self.refine_w) != len(self.refine_b):
            raise ValueError("refinement weights and biases must pair up")
        for w, b in zip(self.refine_w, self.refine_b):
            if w.shape != (l, C + 1) or b.shape != (C + 1,):
                raise ValueError("refinement stages must be (l, C+1) with a (C+1)-vector bias")
        for arr in self.arrays():
            if not np.isfinite(arr).all():
                raise ValueError("model parameters must be finite")

    @property
    def feature_len(self) -> int:
        return self.cls_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[1]

    @property
    def num_branches(self) -> int:
        return len(self.det_w)

    @property
    def num_refine_stages(self) -> int:
        return len(self.refine_w)

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed, documented order."""
        return [self.cls_w, self.cls_b, *self.det_w, *self.det_b,
                *self.refine_w, *self.refine_b]

    def copy(self) -> "ModelParams":
        return params_map(np.copy, self)

    def to_json_dict(self) -> dict:
        return {
            "format_version": PARAMS_FORMAT_VERSION,
            "l": self.feature_len,
            "C": self.num_classes,
            "K": self.num_branches,
            "R": self.num_refine_stages,
            "cls": {"w": self.cls_w.tolist(), "b": self.cls_b.tolist()},
            "det": [{"w": w.tolist(), "b": b.tolist()}
                    for w, b in zip(self.det_w, self.det_b)],
            "refine": [{"w": w.tolist(), "b": b.tolist()}
                       for w, b in zip(self.refine_w, self.refine_b)],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelParams":
        if doc.get("format_version") != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported params format_version {doc.get('format_version')!r}")
        params = cls(
            cls_w=np.array(doc["cls"]["w"], dtype=np.float64),
            cls_b=np.array(doc["cls"]["b"], dtype=np.float64),
            det_w=[np.array(d["w"], dtype=np.float64) for d in doc["det"]],
            det_b=[np.array(d["b"], dtype=np.float64) for d in doc["det"]],
            refine_w=[np.array(d["w"], dtype=np.float64) for d in doc["refine"]],
            refine_b=[np.array(d["b"], dtype=np.float64) for d in doc["refine"]],
        )
        for name, expected, actual in (
            ("l", doc["l"], params.feature_len),
            ("C", doc["C"], params.num_classes),
            ("K", doc["K"], params.num_branches),
            ("R", doc["R"], params.num_refine_stages),
        ):
            if expected != actual:
                raise ValueError(f"params document {name}={expected} but arrays imply {actual}")
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def params_map(fn: Callable[..., np.ndarray], *params: ModelParams) -> ModelParams:
    """Apply ``fn`` entry-array-wise across aligned parameter structures."""
    first = params[0]
    return ModelParams(
        cls_w=fn(*[p.cls_w for p in params]),
        cls_b=fn(*[p.cls_b for p in params]),
        det_w=[fn(*ws) for ws in zip(*[p.det_w for p in params])],
        det_b=[fn(*bs) for bs in zip(*[p.det_b for p in params])],
        refine_w=[fn(*ws) for ws in zip(*[p.refine_w for p in params])]
        if first.refine_w else [],
        refine_b=[fn(*bs) for bs in zip(*[p.refine_b for p in params])]
        if first.refine_b else [],
    )


def params_zeros_like(params: ModelParams) -> ModelParams:
    return params_map(np.zeros_like, params)


@dataclass
class ScoreMatrix:
    """A (C x num_proposals) matrix of per-class, per-proposal values."""

    values: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("score matrix must be 2-D (classes x proposals)")


@dataclass
class ForwardTrace:
    """Everything one forward pass produces, kept for reuse downstream."""

    cls: ScoreMatrix
    det: list[ScoreMatrix]
    coupled: list[ScoreMatrix]
    image_probs: list[np.ndarray]
    branch_losses: list[float]
    total: float


def softmax_over_classes(logits: np.ndarray) -> np.ndarray:
    """Column-wise softmax (each proposal's scores sum to 1 over classes)."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_over_proposals(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax (each class's scores sum to 1 over proposals)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_stochastic(values: np.ndarray, axis: int) -> None:
    sums = values.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=STOCHASTIC_ATOL):
        worst = float(np.abs(sums - 1.0).max())
        raise AssertionError(f"softmax output drifted from stochasticity by {worst:.3e}")


def _cls_logits(features: np.ndarray, params: ModelParams) -> np.ndarray:
    if features.shape[1] != params.feature_len:
        raise ValueError(
            f"feature length {features.shape[1]} does not match model ({params.feature_len})")
    return (features @ params.cls_w + params.cls_b).T


def _det_logits(features: np.ndarray, params: ModelParams, k: int) -> np.ndarray:
    if not 0 <= k < params.num_branches:
        raise ValueError(f"branch index {k} out of range [0, {params.num_branches})")
    if features.shape[1] != params.feature_len:
        raise ValueError(
            f"feature length {features.shape[1]} does not match model ({params.feature_len})")
    return (features @ params.det_w[k] + params.det_b[k]).T


def forward_cls(features: np.ndarray, params: ModelParams) -> ScoreMatrix:
    """Classification stream: per-proposal softmax across classes."""
    probs = softmax_over_classes(_cls_logits(features, params))
    _check_stochastic(probs, axis=0)
    return ScoreMatrix(probs, KIND_SOFTMAX_CLS)


def forward_det(features: np.ndarray, params: ModelParams, k: int) -> ScoreMatrix:
    """Detection stream k: per-class softmax across proposals."""
    probs = softmax_over_proposals(_det_logits(features, params, k))
    _check_stochastic(probs, axis=1)
    return ScoreMatrix(probs, KIND_SOFTMAX_DET)


def couple(cls_sm: ScoreMatrix, det_sm: ScoreMatrix) -> ScoreMatrix:
    """Element-wise product of the two streams' score matrices."""
    if cls_sm.kind != KIND_SOFTMAX_CLS or det_sm.kind != KIND_SOFTMAX_DET:
        raise ValueError(f"cannot couple kinds {cls_sm.kind!r} and {det_sm.kind!r}")
    if cls_sm.values.shape != det_sm.values.shape:
        raise ValueError("score matrices must share their shape to be coupled")
    return ScoreMatrix(cls_sm.values * det_sm.values, KIND_COUPLED)


def image_scores(coupled: ScoreMatrix) -> np.ndarray:
    """Image-level class probabilities: coupled scores summed over proposals.

    The result is clamped to [EPS, 1-EPS] so the downstream cross-entropy
    is always defined.
    """
    if coupled.kind != KIND_COUPLED:
        raise ValueError(f"image scores need a coupled matrix, got {coupled.kind!r}")
    p = coupled.values.sum(axis=1)
    return np.clip(p, P_CLAMP_EPS, 1.0 - P_CLAMP_EPS)


def branch_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Binary cross-entropy of image probabilities against the bag labels."""
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum())


def total_loss(trace: ForwardTrace) -> float:
    """Sum of the branch losses, in branch order."""
    return float(sum(trace.branch_losses))


def forward(bag: ProposalBag, params: ModelParams) -> ForwardTrace:
    """Run every branch on one bag and collect losses."""
    if bag.num_classes != params.num_classes:
        raise ValueError(
            f"bag has {bag.num_classes} classes but model has {params.num_classes}")
    cls_sm = forward_cls(bag.features, params)
    det_sms: list[ScoreMatrix] = []
    coupled_sms: list[ScoreMatrix] = []
    probs: list[np.ndarray] = []
    losses: list[float] = []
    for k in range(params.num_branches):
        det_sm = forward_det(bag.features, params, k)
        coupled_sm = couple(cls_sm, det_sm)
        p = image_scores(coupled_sm)
        det_sms.append(det_sm)
        coupled_sms.append(coupled_sm)
        probs.append(p)
        losses.append(branch_loss(p, bag.labels))
    trace = ForwardTrace(cls_sm, det_sms, coupled_sms, probs, losses, 0.0)
    trace.total = total_loss(trace)
    return trace


def backward(bag: ProposalBag, params: ModelParams, trace: ForwardTrace | None = None) -> ModelParams:
    """Analytic gradients of the total loss with respect to every parameter.

    The classification stream is shared, so its gradient accumulates the
    contribution of all K branches. Refinement-stage slots come back as
    zeros; their losses are differentiated separately. Where the clamp on
    an image probability is active the gradient is zero, matching the
    clamped objective.
    """
    if trace is None:
        trace = forward(bag, params)
    F = bag.features  # (N, l)
    S = trace.cls.values  # (C, N)
    y = bag.labels.astype(np.float64)

    dS_total = np.zeros_like(S)
    det_gw: list[np.ndarray] = []
    det_gb: list[np.ndarray] = []
    for k in range(params.num_branches):
        D = trace.det[k].values
        p_raw = trace.coupled[k].values.sum(axis=1)
        p = np.clip(p_raw, P_CLAMP_EPS, 1.0 - P_CLAMP_EPS)
        unclamped = (p_raw > P_CLAMP_EPS) & (p_raw < 1.0 - P_CLAMP_EPS)
        gp = np.where(unclamped, -y / p + (1.0 - y) / (1.0 - p), 0.0)  # (C,)

        d_coupled = np.repeat(gp[:, None], S.shape[1], axis=1)
        dD = d_coupled * S
        dS_total += d_coupled * D
        # Row softmax Jacobian (per class, across proposals).
        dXd = D * (dD - (dD * D).sum(axis=1, keepdims=True))
        det_gw.append(F.T @ dXd.T)
        det_gb.append(dXd.sum(axis=1))

    # Column softmax Jacobian (per proposal, across classes).
    dXc = S * (dS_total - (dS_total * S).sum(axis=0, keepdims=True))
    cls_gw = F.T @ dXc.T
    cls_gb = dXc.sum(axis=1)

    return ModelParams(
        cls_w=cls_gw,
        cls_b=cls_gb,
        det_w=det_gw,
        det_b=det_gb,
        refine_w=[np.zeros_like(w) for w in params.refine_w],
        refine_b=[np.zeros_like(b) for b in params.refine_b],
    )
