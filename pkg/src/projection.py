"""
Projection Manager

Computes and refreshes the orthonormal low-rank bases P that gradients are
compressed with. Two families are supported:

- full projections, from the whole gradient (exact SVD or randomized subspace
  iteration), always on the shorter side of the matrix;
- cross-head projections, from the gradient block of one randomly selected
  attention head, shared by the whole concatenated query/key gradient.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DimensionError, ParameterError
from src.matrix_core import Matrix, SeededRng, as_matrix, frobenius_norm
from src.svd import LinalgTracker, RsvdParams, rand_subspace_project, truncated_projection

logger = logging.getLogger(__name__)

DEFAULT_INTERVAL = 200


class ProjectionMethod(str, Enum):
    FULL_SVD = "full-svd"
    FULL_RSVD = "full-rsvd"
    CROSS_HEAD_RSVD = "cross-head-rsvd"


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class HeadLayout:
    """Shape of a multi-head attention layer.

    Attributes:
        heads: Number of heads h
        d_model: Model width
        d_k: Per-head query/key width
        d_v: Per-head value width
    """

    heads: int
    d_model: int
    d_k: int
    d_v: int

    def __post_init__(self):
        for name in ("heads", "d_model", "d_k", "d_v"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)

    @property
    def qk_shape(self) -> Tuple[int, int]:
        """Shape of the concatenated query or key weight."""
        return (self.d_model, self.heads * self.d_k)

    @property
    def v_shape(self) -> Tuple[int, int]:
        return (self.d_model, self.heads * self.d_v)

    def head_slice(self, head: int) -> slice:
        """Columns of head `head` inside a concatenated query/key matrix."""
        if not 0 <= head < self.heads:
            raise ParameterError(f"head {head} out of range [0, {self.heads})")
        return slice(head * self.d_k, (head + 1) * self.d_k)


@dataclass(frozen=True)
class RefreshPolicy:
    """Refresh the projection every `interval` steps."""

    interval: int = DEFAULT_INTERVAL

    def __post_init__(self):
        if self.interval < 1:
            raise ParameterError(f"interval must be >= 1, got {self.interval}", field="interval")


@dataclass(frozen=True)
class ProjectionState:
    """An orthonormal basis P and its bookkeeping.

    For a left-side state P is m x r and the compact gradient is P^T G (r x n).
    For a right-side state P is n x r and the compact gradient is P^T G^T (r x m).

    Attributes:
        basis: The orthonormal matrix P
        side: Which dimension of the gradient P spans
        assigned_step: Step at which the basis was computed
        method: How the basis was computed
        heads: Head blocks the basis was computed from (cross-head only)
        identity: True when P spans the whole space and was not decomposed
    """

    basis: Matrix
    side: Side
    assigned_step: int
    method: ProjectionMethod
    heads: Tuple[int, ...] = ()
    identity: bool = False

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def head_index(self) -> Optional[int]:
        return self.heads[0] if self.heads else None

    def orient(self, g: Matrix) -> Matrix:
        """Gradient in the orientation P acts on from the left."""
        g = as_matrix(g, "gradient")
        oriented = g if self.side is Side.LEFT else g.T
        if oriented.shape[0] != self.basis.shape[0]:
            raise DimensionError(
                f"{self.side.value}-side basis with {self.basis.shape[0]} rows cannot act on shape {g.shape}"
            )
        return oriented

    def compact_shape(self, shape: Tuple[int, int]) -> Tuple[int, int]:
        long_side = shape[1] if self.side is Side.LEFT else shape[0]
        return (self.rank, long_side)

    def project(self, g: Matrix) -> Matrix:
        """Original space -> compact space."""
        return self.basis.T @ self.orient(g)

    def project_back(self, compact: Matrix) -> Matrix:
        """Compact space -> original space."""
        full = self.basis @ as_matrix(compact, "compact matrix")
        return full if self.side is Side.LEFT else full.T

    def reconstruct(self, g: Matrix) -> Matrix:
        return self.project_back(self.project(g))

    def values_at(self, compact: Matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Entries of project_back(compact) at original positions (rows[i], cols[i])."""
        if self.side is Side.LEFT:
            return np.einsum("kr,rk->k", self.basis[rows], compact[:, cols])
        return np.einsum("kr,rk->k", self.basis[cols], compact[:, rows])


def _identity_state(size: int, side: Side, step: int, method: ProjectionMethod) -> ProjectionState:
    return ProjectionState(np.eye(size), side, step, method, identity=True)


def compute_full_projection(
    g: Matrix,
    rank: int,
    use_rsvd: bool,
    rsvd: Optional[RsvdParams] = None,
    step: int = 0,
    tracker: Optional[LinalgTracker] = None,
) -> ProjectionState:
    """Top-r singular basis of the whole gradient, on its shorter side.

    A rank equal to the shorter dimension yields the identity basis without any
    decomposition.

    Args:
        g: m x n gradient
        rank: Projection rank r
        use_rsvd: Randomized subspace iteration instead of exact SVD
        rsvd: Oversampling, power iterations and seed for the randomized path
        step: Step recorded as the assignment step
        tracker: Optional accounting hook

    Returns:
        ProjectionState with side LEFT when m <= n
    """
    g = as_matrix(g, "gradient")
    side = Side.LEFT if g.shape[0] <= g.shape[1] else Side.RIGHT
    oriented = g if side is Side.LEFT else g.T
    short = oriented.shape[0]
    method = ProjectionMethod.FULL_RSVD if use_rsvd else ProjectionMethod.FULL_SVD
    if not 1 <= rank <= short:
        raise ParameterError(f"rank {rank} out of range [1, {short}] for gradient {g.shape}", field="rank")

    if rank == short:
        return _identity_state(short, side, step, method)
    if use_rsvd:
        params = replace(rsvd or RsvdParams(rank), rank=rank).clamped(oriented.shape)
        basis = rand_subspace_project(oriented, params, tracker)
    else:
        basis = truncated_projection(oriented, rank, tracker)
    return ProjectionState(basis, side, step, method)


def compute_cross_head_projection(
    g: Matrix,
    layout: HeadLayout,
    rank: int,
    rng: SeededRng,
    rsvd: Optional[RsvdParams] = None,
    step: int = 0,
    heads: Optional[Sequence[int]] = None,
    tracker: Optional[LinalgTracker] = None,
) -> ProjectionState:
    """Basis from one head's gradient block, shared by the concatenated gradient.

    For rank > d_k the block is widened to ceil(rank / d_k) distinct heads.

    Args:
        g: d_model x (h * d_k) concatenated query or key gradient
        layout: Head layout of the attention layer
        rank: Projection rank r
        rng: Stream the head(s) are drawn from
        rsvd: Oversampling, power iterations and seed
        step: Step recorded as the assignment step
        heads: Use these heads instead of drawing (fixed-head mode)
        tracker: Optional accounting hook

    Returns:
        Left-side ProjectionState with a d_model x r basis
    """
    g = as_matrix(g, "gradient")
    if g.shape != layout.qk_shape:
        raise DimensionError(f"gradient shape {g.shape} does not match head layout {layout.qk_shape}")
    if not 1 <= rank <= layout.d_model:
        raise ParameterError(f"rank {rank} out of range [1, {layout.d_model}]", field="rank")

    needed = math.ceil(rank / layout.d_k)
    if needed > layout.heads:
        raise ParameterError(f"rank {rank} needs {needed} head blocks but the layer has {layout.heads}", field="rank")
    if heads is None:
        heads = (rng.integers(layout.heads),) if needed == 1 else rng.choice(layout.heads, needed)
    heads = tuple(int(h) for h in heads)
    if len(heads) < needed:
        raise ParameterError(f"rank {rank} needs {needed} head blocks, got {len(heads)}", field="rank")

    if rank == layout.d_model:
        return _identity_state(layout.d_model, Side.LEFT, step, ProjectionMethod.CROSS_HEAD_RSVD)

    block = np.hstack([g[:, layout.head_slice(h)] for h in heads])
    params = replace(rsvd or RsvdParams(rank), rank=rank).clamped(block.shape)
    basis = rand_subspace_project(block, params, tracker)
    return ProjectionState(basis, Side.LEFT, step, ProjectionMethod.CROSS_HEAD_RSVD, heads=heads)


def should_refresh(step: int, policy: RefreshPolicy) -> bool:
    """True iff the projection is due at zero-based iteration `step`."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    return step % policy.interval == 0


def approximation_error(g: Matrix, state: ProjectionState) -> float:
    """Relative Frobenius error ||G - P P^T G|| / ||G|| (0 for a zero gradient)."""
    norm = frobenius_norm(g)
    if norm == 0.0:
        return 0.0
    return frobenius_norm(as_matrix(g) - state.reconstruct(g)) / norm


def head_approximation_errors(g: Matrix, state: ProjectionState, layout: HeadLayout) -> List[float]:
    """Relative error of each head block of a concatenated gradient under a left-side basis."""
    g = as_matrix(g, "gradient")
    if state.side is not Side.LEFT or g.shape != layout.qk_shape:
        raise DimensionError("per-head errors need a left-side basis and a concatenated query/key gradient")
    errors = []
    for head in range(layout.heads):
        block = g[:, layout.head_slice(head)]
        norm = frobenius_norm(block)
        residual = block - state.basis @ (state.basis.T @ block)
        errors.append(0.0 if norm == 0.0 else frobenius_norm(residual) / norm)
    return errors


class ProjectionManager:
    """Owns the projection of one parameter matrix across a run."""

    def __init__(
        self,
        name: str,
        method: ProjectionMethod,
        rank: int,
        policy: RefreshPolicy,
        rsvd: RsvdParams,
        rng: SeededRng,
        layout: Optional[HeadLayout] = None,
        fixed_head: bool = False,
        tracker: Optional[LinalgTracker] = None,
    ):
        """Initialize the manager.

        Args:
            name: Parameter role, used in logs
            method: How bases are computed
            rank: Requested rank (capped per matrix shape)
            policy: Refresh interval
            rsvd: Template for randomized projections (seed is re-derived per refresh)
            rng: Stream for head draws and sketch seeds
            layout: Head layout, required for cross-head projections
            fixed_head: Keep the heads drawn at the first refresh
            tracker: Optional accounting hook
        """
        if method is ProjectionMethod.CROSS_HEAD_RSVD and layout is None:
            raise ParameterError("cross-head projection needs a head layout")
        self.name = name
        self.method = method
        self.rank = rank
        self.policy = policy
        self.rsvd = rsvd
        self.rng = rng
        self.layout = layout
        self.fixed_head = fixed_head
        self.tracker = tracker
        self.state: Optional[ProjectionState] = None
        self.refresh_count = 0
        self.head_errors: List[float] = []

    def effective_rank(self, shape: Tuple[int, int]) -> int:
        if self.method is ProjectionMethod.CROSS_HEAD_RSVD:
            return min(self.rank, shape[0])
        return min(self.rank, min(shape))

    def due(self, step: int) -> bool:
        return self.state is None or should_refresh(step, self.policy)

    def refresh(self, step: int, g: Matrix) -> ProjectionState:
        """Recompute the basis from gradient `g` at zero-based iteration `step`."""
        rank = self.effective_rank(g.shape)
        rsvd = replace(self.rsvd, rank=rank, seed=self.rng.spawn(step).seed)
        if self.method is ProjectionMethod.CROSS_HEAD_RSVD:
            heads = self.state.heads if (self.fixed_head and self.state is not None and self.state.heads) else None
            self.state = compute_cross_head_projection(
                g, self.layout, rank, self.rng, rsvd, step=step, heads=heads, tracker=self.tracker
            )
        else:
            self.state = compute_full_projection(
                g, rank, self.method is ProjectionMethod.FULL_RSVD, rsvd, step=step, tracker=self.tracker
            )
        self.refresh_count += 1
        logger.debug(
            "refreshed %s at step %d: method=%s rank=%d heads=%s",
            self.name, step, self.method.value, rank, self.state.heads,
        )
        if self.method is ProjectionMethod.CROSS_HEAD_RSVD and self.state.side is Side.LEFT:
            self.head_errors = head_approximation_errors(g, self.state, self.layout)
            logger.debug(
                "%s per-head errors under head %s: %s",
                self.name, self.state.head_index, ", ".join(f"{e:.4g}" for e in self.head_errors),
            )
        return self.state
