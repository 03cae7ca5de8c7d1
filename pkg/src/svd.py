"""
Singular Value Decompositions

Exact SVD by one-sided Jacobi rotations (the accuracy oracle and the GaLore
baseline decomposition) and the randomized subspace iteration projector used
for fast projection refreshes.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from src.errors import NumericalError, ParameterError
from src.matrix_core import Matrix, SeededRng, as_matrix, frobenius_norm, qr_thin

logger = logging.getLogger(__name__)

OFF_DIAGONAL_TOLERANCE = 1e-14
MAX_SWEEPS = 60
DEFAULT_OVERSAMPLE = 8
DEFAULT_POWER_ITERS = 2


@dataclass
class LinalgTracker:
    """Accounting hook for decompositions and dense intermediates.

    Attributes:
        decompositions: Shapes of matrices a projection was computed from
        svd_calls: Shapes passed to exact_svd
        allocations: (label, shape) of every dense intermediate recorded
    """

    decompositions: List[Tuple[int, int]] = field(default_factory=list)
    svd_calls: List[Tuple[int, int]] = field(default_factory=list)
    allocations: List[Tuple[str, Tuple[int, int]]] = field(default_factory=list)

    def record_decomposition(self, shape: Tuple[int, int]) -> None:
        self.decompositions.append(tuple(shape))

    def record_svd(self, shape: Tuple[int, int]) -> None:
        self.svd_calls.append(tuple(shape))

    def record_allocation(self, label: str, shape: Tuple[int, int]) -> None:
        self.allocations.append((label, tuple(shape)))

    @property
    def largest_allocation(self) -> int:
        """Element count of the largest recorded intermediate."""
        return max((rows * cols for _, (rows, cols) in self.allocations), default=0)

    def reset(self) -> None:
        self.decompositions.clear()
        self.svd_calls.clear()
        self.allocations.clear()


@dataclass(frozen=True)
class SvdResult:
    """Thin singular value decomposition u @ diag(singular_values) @ vt; vt is None when not requested."""

    u: Matrix
    singular_values: np.ndarray
    vt: Optional[Matrix]

    def reconstruct(self) -> Matrix:
        return (self.u * self.singular_values) @ self.vt


@dataclass(frozen=True)
class RsvdParams:
    """Randomized subspace iteration settings.

    Attributes:
        rank: Number of basis vectors returned
        oversample: Extra sketch columns
        power_iters: Number of power iterations
        seed: Seed of the Gaussian sketch
    """

    rank: int
    oversample: int = DEFAULT_OVERSAMPLE
    power_iters: int = DEFAULT_POWER_ITERS
    seed: int = 0

    def validate(self, shape: Tuple[int, int]) -> None:
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        if self.oversample < 0:
            raise ParameterError(f"oversample must be >= 0, got {self.oversample}")
        if self.power_iters < 0:
            raise ParameterError(f"power_iters must be >= 0, got {self.power_iters}")
        if self.rank + self.oversample > min(shape):
            raise ParameterError(
                f"rank + oversample = {self.rank + self.oversample} exceeds "
                f"min dimension {min(shape)} of a {shape[0]}x{shape[1]} matrix"
            )

    def clamped(self, shape: Tuple[int, int]) -> "RsvdParams":
        """Copy with the oversampling reduced so the sketch fits `shape`."""
        room = max(min(shape) - self.rank, 0)
        if self.oversample <= room:
            return self
        return RsvdParams(self.rank, room, self.power_iters, self.seed)


@lru_cache(maxsize=None)
def _round_robin(k: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: k-1 (or k) rounds of disjoint column pairs covering all pairs."""
    players = list(range(k)) + ([-1] if k % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = sorted((min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0)
        if pairs:
            left, right = zip(*pairs)
            rounds.append((np.array(left), np.array(right)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _largest_entry_positive(u: Matrix, vt: Optional[Matrix] = None) -> None:
    """Flip columns of u (and rows of vt) in place so each column's largest-magnitude entry is positive."""
    if u.shape[1] == 0:
        return
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u *= signs
    if vt is not None:
        vt *= signs[:, None]


def _pivoted_qr(x: Matrix) -> Tuple[Matrix, Matrix, np.ndarray]:
    """Householder QR with column pivoting: x[:, perm] = q @ r.

    Stops early once the trailing block is exactly zero; the remaining columns
    of q are still orthonormal.
    """
    rows, k = x.shape
    work = x.copy()
    perm = np.arange(k)
    reflectors = []
    for j in range(k):
        trailing = work[j:, j:]
        pivot = j + int(np.argmax(np.einsum("ij,ij->j", trailing, trailing)))
        if pivot != j:
            work[:, [j, pivot]] = work[:, [pivot, j]]
            perm[[j, pivot]] = perm[[pivot, j]]
        column = work[j:, j]
        norm = float(np.linalg.norm(column))
        if norm == 0.0:
            break
        v = column.copy()
        v[0] += math.copysign(norm, column[0])
        v /= np.linalg.norm(v)
        work[j:, j:] -= 2.0 * np.outer(v, v @ work[j:, j:])
        reflectors.append(v)

    q = np.eye(rows, k)
    for j in range(len(reflectors) - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q, q.T @ x[:, perm], perm


def _jacobi_sweeps(cols: Matrix, rotations: Optional[Matrix], floor: float, max_sweeps: int) -> int:
    """Rotate rows of `cols` (and `rotations`) in place until all pairs are orthogonal.

    Rows hold the columns being orthogonalized so every pair is contiguous.
    Returns the number of sweeps used.
    """
    schedule = _round_robin(cols.shape[0])
    for sweep in range(1, max_sweeps + 1):
        rotated = 0
        for left, right in schedule:
            xp = cols[left]
            xq = cols[right]
            alpha = np.einsum("ij,ij->i", xp, xp)
            beta = np.einsum("ij,ij->i", xq, xq)
            gamma = np.einsum("ij,ij->i", xp, xq)
            active = (np.abs(gamma) > OFF_DIAGONAL_TOLERANCE * np.sqrt(alpha * beta)) & (np.abs(gamma) > floor)
            if not active.any():
                continue
            if not active.all():
                left, right = left[active], right[active]
                xp, xq = xp[active], xq[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]

            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]

            cols[left] = c * xp - s * xq
            cols[right] = s * xp + c * xq
            if rotations is not None:
                rp, rq = rotations[left], rotations[right]
                rotations[left] = c * rp - s * rq
                rotations[right] = s * rp + c * rq
            rotated += int(left.size)
        if rotated == 0:
            return sweep
    raise NumericalError(
        f"Jacobi SVD did not converge after {max_sweeps} sweeps",
        stage="svd",
        sweeps=max_sweeps,
    )


def exact_svd(
    a: Matrix,
    tracker: Optional[LinalgTracker] = None,
    max_sweeps: int = MAX_SWEEPS,
    compute_vt: bool = True,
) -> SvdResult:
    """Thin SVD by cyclic one-sided Jacobi rotations on a preconditioned factor.

    The taller orientation X is reduced by a column-pivoted QR, X P = Q R, and a
    second QR of R^T, R = L Q2^T. Jacobi then orthogonalizes the columns of the
    square factor L (all disjoint pairs of a round at once) until every pair is
    orthogonal to OFF_DIAGONAL_TOLERANCE, which takes far fewer sweeps than
    rotating X directly.

    Args:
        a: Finite m x n matrix
        tracker: Optional accounting hook
        max_sweeps: Sweep budget before giving up
        compute_vt: Also return the right singular vectors; when False and
            m >= n no rotations are accumulated and vt is None

    Returns:
        SvdResult with u (m x min(m,n)), non-increasing singular values and vt (min(m,n) x n)
    """
    a = as_matrix(a, "svd input")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input contains non-finite entries", stage="svd")

    m, n = a.shape
    transposed = m < n
    x = a.T if transposed else a
    k = x.shape[1]
    need_right = transposed or compute_vt

    q, r, perm = _pivoted_qr(x)
    q2 = qr_thin(r.T)
    cols = (r @ q2).T.copy()
    rotations = np.eye(k) if need_right else None
    if tracker is not None:
        tracker.record_svd(a.shape)
        tracker.record_allocation("jacobi_basis", q.shape)
        tracker.record_allocation("jacobi_work", cols.shape)
        if rotations is not None:
            tracker.record_allocation("jacobi_rotations", rotations.shape)

    norm = frobenius_norm(a)
    sweeps = _jacobi_sweeps(cols, rotations, (OFF_DIAGONAL_TOLERANCE * norm) ** 2, max_sweeps)
    logger.debug("Jacobi SVD of %dx%d converged in %d sweep(s)", m, n, sweeps)

    sigma = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    cols = cols[order]

    null = sigma <= OFF_DIAGONAL_TOLERANCE * norm
    left_vectors = np.zeros((k, k))
    left_vectors[:, ~null] = cols[~null].T / sigma[~null]
    if null.any():
        sigma[null] = 0.0
        left_vectors = qr_thin(left_vectors)
    x_left = q @ left_vectors

    x_right = None
    if rotations is not None:
        x_right = np.empty((k, k))
        x_right[perm] = q2 @ rotations[order].T

    if transposed:
        u, vt = x_right, x_left.T.copy()
    else:
        u, vt = x_left, None if x_right is None else x_right.T.copy()
    _largest_entry_positive(u, vt)
    return SvdResult(u=u, singular_values=sigma, vt=vt)


def rand_subspace_project(a: Matrix, params: RsvdParams, tracker: Optional[LinalgTracker] = None) -> Matrix:
    """Approximate top-r left singular basis by randomized subspace iteration.

    Draws a Gaussian sketch, applies `power_iters` re-orthonormalized power
    iterations, then takes the exact SVD of the small projected matrix.

    Args:
        a: m x n matrix
        params: Rank, oversampling, power iterations and seed
        tracker: Optional accounting hook

    Returns:
        m x rank matrix with orthonormal columns
    """
    a = as_matrix(a, "rsvd input")
    params.validate(a.shape)
    m, n = a.shape
    width = params.rank + params.oversample
    if tracker is not None:
        tracker.record_decomposition(a.shape)

    rng = SeededRng(params.seed)
    completion = rng.spawn(1)
    omega = rng.standard_normal(n, width)
    sketch = a @ omega
    if tracker is not None:
        tracker.record_allocation("omega", omega.shape)
        tracker.record_allocation("sketch", sketch.shape)

    for _ in range(params.power_iters):
        sketch = qr_thin(sketch, completion)
        back = a.T @ sketch
        if tracker is not None:
            tracker.record_allocation("power", back.shape)
        sketch = a @ back

    basis = qr_thin(sketch, completion)
    small = basis.T @ a
    if tracker is not None:
        tracker.record_allocation("projected", small.shape)

    projection = basis @ exact_svd(small, tracker, compute_vt=False).u[:, : params.rank]
    _largest_entry_positive(projection)
    return projection


def truncated_projection(a: Matrix, rank: int, tracker: Optional[LinalgTracker] = None) -> Matrix:
    """First `rank` exact left singular vectors of `a`."""
    a = as_matrix(a, "projection input")
    if not 1 <= rank <= min(a.shape):
        raise ParameterError(f"rank {rank} out of range [1, {min(a.shape)}] for shape {a.shape}")
    if tracker is not None:
        tracker.record_decomposition(a.shape)
    return exact_svd(a, tracker, compute_vt=False).u[:, :rank].copy()
