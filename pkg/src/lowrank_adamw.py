"""
AdamW With Low-Rank Moments

Dense AdamW moments for reference, and the GaLore variant that keeps the
first and second moments in the projected (compact) space and maps the
normalized update back to the parameter space.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from src.errors import DimensionError, NumericalError, ParameterError
from src.matrix_core import Matrix, as_matrix
from src.projection import ProjectionState

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW and projection hyperparameters.

    Attributes:
        lr: Learning rate
        beta1: First moment decay rate
        beta2: Second moment decay rate
        eps: Denominator stabilizer
        weight_decay: Decoupled weight decay coefficient
        alpha: Multiplier of the back-projected low-rank update
        rank: Projection rank r
        interval: Steps between projection refreshes T
        lr_schedule: "constant" or "cosine"
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    alpha: float = 1.0
    rank: int = 8
    interval: int = 200
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"must be > 0, got {self.lr}", field="lr")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ParameterError(f"must be in [0, 1), got {value}", field=name)
        if not self.eps > 0:
            raise ParameterError(f"must be > 0, got {self.eps}", field="eps")
        if self.weight_decay < 0:
            raise ParameterError(f"must be >= 0, got {self.weight_decay}", field="weight_decay")
        if not self.alpha > 0:
            raise ParameterError(f"must be > 0, got {self.alpha}", field="alpha")
        if self.rank < 1:
            raise ParameterError(f"must be >= 1, got {self.rank}", field="rank")
        if self.interval < 1:
            raise ParameterError(f"must be >= 1, got {self.interval}", field="interval")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ParameterError(f"must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}", field="lr_schedule")

    def learning_rate_at(self, t: int, total_steps: int) -> float:
        """Learning rate of one-based step t."""
        if self.lr_schedule == "constant":
            return self.lr
        progress = (t - 1) / max(total_steps, 1)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class DenseMoments:
    """Full-size AdamW moments M, V after t steps."""

    m: Matrix
    v: Matrix
    t: int = 0

    @classmethod
    def zeros(cls, shape: Tuple[int, int]) -> "DenseMoments":
        return cls(np.zeros(shape), np.zeros(shape), 0)

    @property
    def element_count(self) -> int:
        return self.m.size + self.v.size


@dataclass(frozen=True)
class LowRankMoments:
    """Compact moments M', V' (r x long side) after t steps."""

    mp: Matrix
    vp: Matrix
    t: int = 0

    @classmethod
    def zeros(cls, shape: Tuple[int, int]) -> "LowRankMoments":
        return cls(np.zeros(shape), np.zeros(shape), 0)

    @property
    def element_count(self) -> int:
        return self.mp.size + self.vp.size


class CompactStep(NamedTuple):
    """Compact-space quantities of one low-rank step."""

    gradient: Matrix
    mp: Matrix
    vp: Matrix
    direction: Matrix


def _check_finite(g: Matrix) -> None:
    if not np.all(np.isfinite(g)):
        raise NumericalError("gradient contains non-finite entries", stage="gradient")


def _bias_corrected_direction(m: Matrix, v: Matrix, t: int, cfg: OptimizerConfig) -> Matrix:
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    return m_hat / (np.sqrt(v_hat) + cfg.eps)


def step_dense(g: Matrix, moments: DenseMoments, cfg: OptimizerConfig) -> Tuple[Matrix, DenseMoments]:
    """One AdamW moment update.

    Weight decay is not part of the returned update; apply_update handles it.

    Args:
        g: Gradient
        moments: Moments before the step
        cfg: Optimizer settings

    Returns:
        Tuple of (update in the gradient direction, moments after the step)
    """
    g = as_matrix(g, "gradient")
    if g.shape != moments.m.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match moments {moments.m.shape}")
    _check_finite(g)

    t = moments.t + 1
    m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * (g * g)
    update = cfg.lr * _bias_corrected_direction(m, v, t, cfg)
    return update, DenseMoments(m, v, t)


def step_lowrank(
    g: Matrix,
    proj: ProjectionState,
    moments: LowRankMoments,
    cfg: OptimizerConfig,
) -> Tuple[Matrix, LowRankMoments, CompactStep]:
    """One AdamW step with moments kept in the compact space.

    Args:
        g: m x n gradient
        proj: Current projection
        moments: Compact moments before the step
        cfg: Optimizer settings

    Returns:
        Tuple of (m x n update alpha * lr * P N, moments after the step, compact quantities)
    """
    g = as_matrix(g, "gradient")
    expected = proj.compact_shape(g.shape)
    if moments.mp.shape != expected:
        raise DimensionError(f"compact moments {moments.mp.shape} do not match projected shape {expected}")
    _check_finite(g)

    r = proj.project(g)
    t = moments.t + 1
    mp = cfg.beta1 * moments.mp + (1.0 - cfg.beta1) * r
    vp = cfg.beta2 * moments.vp + (1.0 - cfg.beta2) * (r * r)
    direction = _bias_corrected_direction(mp, vp, t, cfg)
    update = (cfg.alpha * cfg.lr) * proj.project_back(direction)
    return update, LowRankMoments(mp, vp, t), CompactStep(r, mp, vp, direction)


def dense_state_elements(shape: Tuple[int, int]) -> int:
    return 2 * shape[0] * shape[1]


def lowrank_state_elements(shape: Tuple[int, int], rank: int) -> int:
    return 2 * rank * max(shape)
