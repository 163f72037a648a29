"""Weight initialization: per-class orthogonal branches and a Gaussian baseline.

The orthogonal strategy makes the K detection branches start as different
as possible: for every class, the K weight columns form an orthonormal set
obtained by QR-factorizing a fresh random matrix. The Gaussian strategy is
the conventional small-noise baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .milnet import ModelParams

STRATEGY_ORTHOGONAL = "orthogonal"
STRATEGY_GAUSSIAN = "gaussian"

DEFAULT_GAUSSIAN_STD = 0.01


@dataclass
class InitSpec:
    """Which strategy to use for the detection branches, and its knobs.

    The classification stream and refinement stages always use Gaussian
    init; the strategy choice applies to detection-branch weights only.
    Biases are zero-initialized.
    """

    strategy: str = STRATEGY_ORTHOGONAL
    gaussian_std: float = DEFAULT_GAUSSIAN_STD
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in (STRATEGY_ORTHOGONAL, STRATEGY_GAUSSIAN):
            raise ValueError(f"unknown init strategy {self.strategy!r}")
        if not self.gaussian_std > 0.0:
            raise ValueError(f"gaussian_std must be positive, got {self.gaussian_std}")


def orthogonal_init(feature_len: int, num_classes: int, num_branches: int, seed: int) -> list[np.ndarray]:
    """Per-class orthonormal branch columns via QR factorization.

    For each class independently, draw a (feature_len x num_branches)
    standard-normal matrix, QR-factorize it (sign-fixed so the triangular
    factor has a non-negative diagonal, which makes the result
    deterministic), and hand column k of the orthonormal factor to branch
    k's column for that class.
    """
    if num_branches > feature_len:
        raise ValueError(
            f"cannot build {num_branches} orthonormal vectors in a {feature_len}-dimensional "
            f"feature space; at most feature_len branches are possible")
    rng = np.random.default_rng(seed)
    mats = [np.zeros((feature_len, num_classes)) for _ in range(num_branches)]
    for c in range(num_classes):
        a = rng.standard_normal((feature_len, num_branches))
        q, r = np.linalg.qr(a, mode="reduced")
        signs = np.sign(np.diag(r))
        signs[signs == 0.0] = 1.0
        q = q * signs
        for k in range(num_branches):
            mats[k][:, c] = q[:, k]
    return mats


def gaussian_init(
    feature_len: int,
    num_classes: int,
    num_branches: int,
    std: float,
    seed: int,
) -> list[np.ndarray]:
    """I.i.d. N(0, std^2) branch weights, one derived seed per branch."""
    if not std > 0.0:
        raise ValueError(f"std must be positive, got {std}")
    children = np.random.SeedSequence(seed).spawn(num_branches)
    return [np.random.default_rng(child).normal(0.0, std, size=(feature_len, num_classes))
            for child in children]


def init_model_params(
    feature_len: int,
    num_classes: int,
    num_branches: int,
    num_refine_stages: int,
    spec: InitSpec,
) -> ModelParams:
    """Build a full parameter set from one initialization spec."""
    seed_rng = np.random.default_rng(spec.seed)
    det_seed, cls_seed, refine_seed = (int(s) for s in seed_rng.integers(0, 2**63, size=3))

    if spec.strategy == STRATEGY_ORTHOGONAL:
        det_w = orthogonal_init(feature_len, num_classes, num_branches, det_seed)
    else:
        det_w = gaussian_init(feature_len, num_classes, num_branches, spec.gaussian_std, det_seed)
    cls_w = gaussian_init(feature_len, num_classes, 1, spec.gaussian_std, cls_seed)[0]
    if num_refine_stages > 0:
        refine_w = gaussian_init(feature_len, num_classes + 1, num_refine_stages,
                                 spec.gaussian_std, refine_seed)
    else:
        refine_w = []

    return ModelParams(
        cls_w=cls_w,
        cls_b=np.zeros(num_classes),
        det_w=det_w,
        det_b=[np.zeros(num_classes) for _ in range(num_branches)],
        refine_w=refine_w,
        refine_b=[np.zeros(num_classes + 1) for _ in range(num_refine_stages)],
    )
