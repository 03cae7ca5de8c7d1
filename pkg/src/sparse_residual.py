"""
Sparsely Coded Residuals

Tracks the part of the AdamW moments lost by the low-rank representation on a
fixed sparse set of positions, and turns it into a correction of the weight
update. The positions are chosen once, at the end of a warm-up stage, as the
largest entries of the back-projected first moment.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from src.errors import ContractViolation, DimensionError, ParameterError
from src.lowrank_adamw import CompactStep, OptimizerConfig
from src.matrix_core import Matrix, as_matrix
from src.projection import ProjectionState, Side

logger = logging.getLogger(__name__)

DEFAULT_RATIO = 0.012
DEFAULT_CLIP = 1.0


@dataclass(frozen=True)
class ResidualConfig:
    """Sparse residual settings.

    Attributes:
        ratio: Fraction of entries tracked
        warmup_k: Steps before the index is built
        alpha_res: Multiplier of the residual correction
        clip: Bound on the magnitude of each correction entry
    """

    ratio: float = DEFAULT_RATIO
    warmup_k: int = 200
    alpha_res: float = 1.0
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ParameterError(f"must be in [0, 1], got {self.ratio}", field="ratio")
        if self.warmup_k < 1:
            raise ParameterError(f"must be >= 1, got {self.warmup_k}", field="warmup_k")
        if self.alpha_res < 0:
            raise ParameterError(f"must be >= 0, got {self.alpha_res}", field="alpha_res")
        if not self.clip > 0:
            raise ParameterError(f"must be > 0, got {self.clip}", field="clip")


def index_size(ratio: float, shape: Tuple[int, int]) -> int:
    """Number of positions ceil(ratio * m * n) kept for a matrix of `shape`."""
    return math.ceil(round(ratio * shape[0] * shape[1], 9))


@dataclass(frozen=True)
class SparseIndex:
    """Row-major sorted set of distinct matrix positions.

    Attributes:
        rows: Row of each position
        cols: Column of each position
        shape: Shape of the matrix the positions live in
        ratio: Fraction of entries the index was built for
    """

    rows: np.ndarray
    cols: np.ndarray
    shape: Tuple[int, int]
    ratio: float

    def __len__(self) -> int:
        return int(self.rows.size)

    @property
    def positions(self) -> List[Tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def gather(self, matrix: Matrix) -> np.ndarray:
        return matrix[self.rows, self.cols]

    def scatter(self, values: np.ndarray) -> Matrix:
        dense = np.zeros(self.shape)
        dense[self.rows, self.cols] = values
        return dense

    @property
    def value_slots(self) -> int:
        """Values stored per tracked quantity pair (dM and dV)."""
        return 2 * len(self)

    @property
    def index_slots(self) -> int:
        """Integers stored for the coordinates."""
        return 2 * len(self)


@dataclass(frozen=True)
class SparseDelta:
    """Update correction, non-zero only on the index positions."""

    index: SparseIndex
    values: np.ndarray

    def to_dense(self) -> Matrix:
        return self.index.scatter(self.values)


@dataclass(frozen=True)
class ResidualState:
    """Sparse moment residuals of one parameter.

    Attributes:
        index: Tracked positions (None during warm-up)
        dm: First moment residual on the index
        dv: Second moment residual on the index
        warmup_k: Warm-up length
        active: Whether the index has been built
        clamp_count: Negative second-moment estimates seen so far
    """

    index: Optional[SparseIndex]
    dm: np.ndarray
    dv: np.ndarray
    warmup_k: int
    active: bool = False
    clamp_count: int = 0

    @classmethod
    def inactive(cls, warmup_k: int) -> "ResidualState":
        return cls(None, np.zeros(0), np.zeros(0), warmup_k)

    def activate(self, index: SparseIndex) -> "ResidualState":
        return replace(self, index=index, dm=np.zeros(len(index)), dv=np.zeros(len(index)), active=True)

    @property
    def element_count(self) -> int:
        return 0 if self.index is None else self.index.value_slots

    @property
    def index_elements(self) -> int:
        return 0 if self.index is None else self.index.index_slots


def build_index(p: Matrix, mp: Matrix, ratio: float, side: Side = Side.LEFT) -> SparseIndex:
    """Positions of the ceil(ratio * m * n) largest entries of |P M'|.

    Ties are broken in row-major order. A right-side basis reports positions in
    the transposed (original) coordinates.

    Args:
        p: Orthonormal basis
        mp: Compact first moment
        ratio: Fraction of entries to keep; 0 gives an empty index
        side: Side of the basis

    Returns:
        SparseIndex sorted row-major
    """
    reconstruction = as_matrix(p, "basis") @ as_matrix(mp, "compact moment")
    if side is Side.RIGHT:
        reconstruction = reconstruction.T
    m, n = reconstruction.shape
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"ratio must be in [0, 1], got {ratio}", field="ratio")
    if ratio == 0.0:
        empty = np.zeros(0, dtype=np.int64)
        return SparseIndex(empty, empty.copy(), (m, n), ratio)
    if ratio * m * n < 1.0:
        raise ParameterError(f"ratio {ratio} keeps no entry of a {m}x{n} matrix", field="ratio")

    count = index_size(ratio, (m, n))
    order = np.argsort(-np.abs(reconstruction).ravel(), kind="stable")[:count]
    rows, cols = np.divmod(np.sort(order), n)
    logger.debug("built sparse index with %d of %d positions", count, m * n)
    return SparseIndex(rows.astype(np.int64), cols.astype(np.int64), (m, n), ratio)


def residual_step(
    g: Matrix,
    proj: ProjectionState,
    vp: Matrix,
    state: ResidualState,
    t: int,
    cfg: OptimizerConfig,
    clip: float = DEFAULT_CLIP,
) -> Tuple[SparseDelta, ResidualState]:
    """Advance the sparse moment residuals and return the update correction.

    Everything is evaluated on the index positions only. Positions whose
    second-moment estimate P V' + dV is not positive get no correction, and the
    remaining entries are clipped to [-clip, clip].

    Args:
        g: Gradient at step t
        proj: Projection used at step t
        vp: Compact second moment after step t
        state: Active residual state
        t: One-based step (for bias correction)
        cfg: Optimizer settings
        clip: Bound on each correction entry

    Returns:
        Tuple of (correction delta, state after the step)
    """
    if not state.active or state.index is None:
        raise ContractViolation("residual_step called before the sparse index was built")
    g = as_matrix(g, "gradient")
    index = state.index
    if g.shape != index.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match index shape {index.shape}")

    rows, cols = index.rows, index.cols
    g_hat = proj.values_at(proj.project(g), rows, cols)
    dg = g[rows, cols] - g_hat

    dm = cfg.beta1 * state.dm + (1.0 - cfg.beta1) * dg
    dv = cfg.beta2 * state.dv + 2.0 * (1.0 - cfg.beta2) * g_hat * dg
    dm_hat = dm / (1.0 - cfg.beta1 ** t)
    dv_hat = dv / (1.0 - cfg.beta2 ** t)
    pv_hat = proj.values_at(vp, rows, cols) / (1.0 - cfg.beta2 ** t)

    radicand = pv_hat + dv_hat
    clamps = int(np.count_nonzero(radicand < 0.0))
    if clamps:
        logger.debug("no correction at %d position(s) with a negative second-moment estimate at step %d", clamps, t)
    positive = radicand > 0.0
    delta = np.zeros_like(dm_hat)
    delta[positive] = dm_hat[positive] / (np.sqrt(radicand[positive]) + cfg.eps)
    np.clip(delta, -clip, clip, out=delta)
    return SparseDelta(index, delta), replace(state, dm=dm, dv=dv, clamp_count=state.clamp_count + clamps)


def apply_update(
    w: Matrix,
    lowrank_update: Matrix,
    delta: Optional[SparseDelta],
    cfg: OptimizerConfig,
    residual_scale: float = 1.0,
) -> Matrix:
    """Descend along the low-rank update plus the scattered residual correction.

    W' = W - lowrank_update - lr * residual_scale * delta - lr * weight_decay * W

    Args:
        w: Current weight
        lowrank_update: Back-projected (or dense) update in the gradient direction
        delta: Residual correction, None during warm-up
        cfg: Optimizer settings (lr and weight decay)
        residual_scale: Multiplier of the correction

    Returns:
        The new weight
    """
    w = as_matrix(w, "weight")
    lowrank_update = as_matrix(lowrank_update, "update")
    if lowrank_update.shape != w.shape:
        raise DimensionError(f"update shape {lowrank_update.shape} does not match weight {w.shape}")

    updated = w - lowrank_update
    if delta is not None and len(delta.index):
        if delta.index.shape != w.shape:
            raise DimensionError(f"residual shape {delta.index.shape} does not match weight {w.shape}")
        updated[delta.index.rows, delta.index.cols] -= (cfg.lr * residual_scale) * delta.values
    if cfg.weight_decay:
        updated -= (cfg.lr * cfg.weight_decay) * w
    return updated


class SparseResidual:
    """Warm-up, index construction and residual steps for one parameter."""

    def __init__(self, config: ResidualConfig):
        self.config = config
        self.state = ResidualState.inactive(config.warmup_k)

    @property
    def index(self) -> Optional[SparseIndex]:
        return self.state.index

    def observe(
        self,
        t: int,
        g: Matrix,
        proj: ProjectionState,
        compact: CompactStep,
        cfg: OptimizerConfig,
    ) -> Optional[SparseDelta]:
        """Consume the low-rank step of one-based step t.

        Returns None during warm-up. The index is built from P M' at step k.
        """
        delta = None
        if t > self.config.warmup_k:
            delta, self.state = residual_step(g, proj, compact.vp, self.state, t, cfg, self.config.clip)
        elif t == self.config.warmup_k:
            index = build_index(proj.basis, compact.mp, self.config.ratio, proj.side)
            self.state = self.state.activate(index)
            logger.info("sparse residual index frozen at step %d with %d positions", t, len(index))
        return delta
