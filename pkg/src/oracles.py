"""
Reference Oracles

Brute-force, definition-level implementations used as correctness anchors in
tests: loop-based products, a two-sided Jacobi eigensolver, a loop-based
attention loss, principal angles, and a dense trace of the AdamW moments and
their low-rank residuals. Nothing here calls into the fast optimizer paths.
Intended for small matrices only.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Tuple

import numpy as np

from src.errors import ContractViolation, DimensionError, NumericalError
from src.lowrank_adamw import OptimizerConfig
from src.matrix_core import Matrix, as_matrix, qr_thin
from src.svd import exact_svd

logger = logging.getLogger(__name__)


def naive_matmul(a: Matrix, b: Matrix) -> Matrix:
    """Triple-loop matrix product."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            total = 0.0
            for k in range(a.shape[1]):
                total += a[i, k] * b[k, j]
            out[i, j] = total
    return out


def jacobi_eigh(s: Matrix, tolerance: float = 1e-14, max_sweeps: int = 100) -> Tuple[np.ndarray, Matrix]:
    """Eigen-decomposition of a symmetric matrix by cyclic two-sided Jacobi rotations.

    Args:
        s: Symmetric matrix
        tolerance: Stop when the off-diagonal norm falls below tolerance * ||S||_F
        max_sweeps: Sweep limit

    Returns:
        Tuple of (eigenvalues in descending order, eigenvectors as columns)
    """
    a = as_matrix(s, "symmetric matrix").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    vectors = np.eye(n)
    scale = float(np.linalg.norm(a))

    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tolerance * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                rotation = np.eye(n)
                rotation[p, p] = c
                rotation[q, q] = c
                rotation[p, q] = sn
                rotation[q, p] = -sn
                a = rotation.T @ a @ rotation
                a[p, q] = a[q, p] = 0.0
                vectors = vectors @ rotation
    else:
        raise NumericalError("two-sided Jacobi did not converge", stage="jacobi_eigh", sweeps=max_sweeps)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return eigenvalues[order], vectors[:, order]


def naive_singular_values(a: Matrix) -> np.ndarray:
    """Singular values from the eigenvalues of the Gram matrix of the shorter side."""
    a = as_matrix(a)
    gram = naive_matmul(a.T, a) if a.shape[0] >= a.shape[1] else naive_matmul(a, a.T)
    eigenvalues, _ = jacobi_eigh(gram)
    return np.sqrt(np.maximum(eigenvalues, 0.0))


def eckart_young_tail(singular_values: np.ndarray, rank: int) -> float:
    """Smallest Frobenius error of any rank-`rank` approximation."""
    tail = np.asarray(singular_values, dtype=np.float64)[rank:]
    return float(math.sqrt(float(np.sum(tail * tail))))


def principal_cosines(a: Matrix, b: Matrix) -> np.ndarray:
    """Cosines of the principal angles between the column spaces of a and b."""
    qa = qr_thin(as_matrix(a))
    qb = qr_thin(as_matrix(b))
    return np.clip(exact_svd(qa.T @ qb, compute_vt=False).singular_values, 0.0, 1.0)


def naive_attention_loss(params, batch) -> float:
    """Attention loss computed sequence by sequence and head by head with explicit loops."""
    layout = params.layout
    inputs, targets = batch.inputs, batch.targets
    total = 0.0
    for b in range(inputs.shape[0]):
        x = inputs[b]
        seq_len = x.shape[0]
        heads = []
        for h in range(layout.heads):
            qk = slice(h * layout.d_k, (h + 1) * layout.d_k)
            vs = slice(h * layout.d_v, (h + 1) * layout.d_v)
            q = naive_matmul(x, params.wq[:, qk])
            k = naive_matmul(x, params.wk[:, qk])
            v = naive_matmul(x, params.wv[:, vs])
            head = np.zeros((seq_len, layout.d_v))
            for i in range(seq_len):
                scores = [float(np.dot(q[i], k[j])) / math.sqrt(layout.d_k) for j in range(seq_len)]
                top = max(scores)
                weights = [math.exp(s - top) for s in scores]
                norm = sum(weights)
                for j in range(seq_len):
                    head[i] += (weights[j] / norm) * v[j]
            heads.append(head)
        output = naive_matmul(np.hstack(heads), params.wo)
        pooled = output.sum(axis=0) / seq_len
        prediction = naive_matmul(pooled[None, :], params.readout)[0]
        for o in range(prediction.shape[0]):
            total += (prediction[o] - targets[b, o]) ** 2
    return total / targets.size


@dataclass(frozen=True)
class DenseResidualTrace:
    """Dense and compact AdamW moments under a fixed left-side basis.

    Attributes:
        basis: The fixed basis P (m x r)
        m: Dense first moment
        v: Dense second moment
        mp: Compact first moment
        vp: Compact second moment
        dm_exact: M - P Mp
        dv_exact: V - P Vp
        dropped: Accumulated second-moment terms the residual recursion omits
        t: Steps traced
        gradients: Every gradient seen, oldest first
        dropped_history: Per-step dropped term, oldest first
    """

    basis: Matrix
    m: Matrix
    v: Matrix
    mp: Matrix
    vp: Matrix
    dm_exact: Matrix
    dv_exact: Matrix
    dropped: Matrix
    t: int = 0
    gradients: Tuple[Matrix, ...] = field(default=(), repr=False)
    dropped_history: Tuple[Matrix, ...] = field(default=(), repr=False)

    @classmethod
    def start(cls, p: Matrix, shape: Tuple[int, int]) -> "DenseResidualTrace":
        p = as_matrix(p, "basis").copy()
        if p.shape[0] != shape[0]:
            raise DimensionError(f"basis with {p.shape[0]} rows cannot act on shape {shape}")
        dense = np.zeros(shape)
        compact = np.zeros((p.shape[1], shape[1]))
        return cls(p, dense, dense, compact, compact, dense, dense, dense)

    @property
    def dv_recursion(self) -> Matrix:
        """Second-moment residual as the sparse recursion would carry it (exact minus dropped)."""
        return self.dv_exact - self.dropped


def trace_step(g: Matrix, p: Matrix, trace: DenseResidualTrace, cfg: OptimizerConfig) -> DenseResidualTrace:
    """Advance the trace by one gradient.

    Args:
        g: m x n gradient
        p: Basis of this step; must equal the traced basis
        trace: Trace after the previous step
        cfg: beta1 and beta2 are used

    Returns:
        The trace after this step
    """
    g = as_matrix(g, "gradient")
    p = as_matrix(p, "basis")
    if p.shape != trace.basis.shape or not np.array_equal(p, trace.basis):
        raise ContractViolation("the basis changed in the middle of a dense residual trace")
    if g.shape != trace.m.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match traced shape {trace.m.shape}")

    b1, b2 = cfg.beta1, cfg.beta2
    compact_g = p.T @ g
    m = b1 * trace.m + (1.0 - b1) * g
    v = b2 * trace.v + (1.0 - b2) * (g * g)
    mp = b1 * trace.mp + (1.0 - b1) * compact_g
    vp = b2 * trace.vp + (1.0 - b2) * (compact_g * compact_g)

    reconstructed = p @ compact_g
    lost = g - reconstructed
    step_dropped = (1.0 - b2) * (reconstructed * reconstructed - p @ (compact_g * compact_g) + lost * lost)

    return replace(
        trace,
        m=m,
        v=v,
        mp=mp,
        vp=vp,
        dm_exact=m - p @ mp,
        dv_exact=v - p @ vp,
        dropped=b2 * trace.dropped + step_dropped,
        t=trace.t + 1,
        gradients=trace.gradients + (g.copy(),),
        dropped_history=trace.dropped_history + (step_dropped,),
    )


class UpdateError(NamedTuple):
    """Exact and approximated difference between the dense and low-rank directions.

    Both are per unit learning rate, in the units of the sparse residual delta.
    """

    exact: Matrix
    approximate: Matrix
    positive_mask: np.ndarray

    def relative_error(self) -> float:
        """||approximate - exact|| / ||exact|| over positions where P Vp is positive."""
        exact = self.exact[self.positive_mask]
        norm = float(np.linalg.norm(exact))
        if norm == 0.0:
            return 0.0
        return float(np.linalg.norm(self.approximate[self.positive_mask] - exact)) / norm


def dense_update_error(trace: DenseResidualTrace, t: int, cfg: OptimizerConfig) -> UpdateError:
    """Difference between the dense AdamW direction and the low-rank one at step t.

    The exact value is the dense direction minus the back-projected moments
    P M' / (sqrt(P V') + eps), taken where P V' is positive. The approximation
    divides the bias-corrected first-moment residual by the square root of P V'
    plus the recursion's second-moment residual, and is zero where that sum is
    not positive.

    Args:
        trace: Trace populated up to step t
        t: Step the trace must be at
        cfg: Optimizer settings (beta1, beta2, eps)

    Returns:
        UpdateError with both matrices and the positive-P-Vp mask
    """
    if trace.t != t or t < 1:
        raise ContractViolation(f"trace is at step {trace.t}, not {t}")
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    p = trace.basis

    back_projected_v = p @ trace.vp
    positive = back_projected_v > 0.0
    dense_direction = (trace.m / c1) / (np.sqrt(trace.v / c2) + cfg.eps)
    lowrank_direction = np.zeros_like(dense_direction)
    lowrank_direction[positive] = ((p @ trace.mp)[positive] / c1) / (
        np.sqrt(back_projected_v[positive] / c2) + cfg.eps
    )
    exact = dense_direction - lowrank_direction

    radicand = (back_projected_v + trace.dv_recursion) / c2
    approximate = np.zeros_like(radicand)
    kept = radicand > 0.0
    approximate[kept] = (trace.dm_exact[kept] / c1) / (np.sqrt(radicand[kept]) + cfg.eps)
    return UpdateError(exact, approximate, positive)


def dense_adamw_updates(
    gradients: List[Matrix], cfg: OptimizerConfig
) -> List[Matrix]:
    """Dense AdamW updates of a gradient stream, written straight from the definitions."""
    m = v = None
    updates = []
    for t, g in enumerate(gradients, start=1):
        g = as_matrix(g, "gradient")
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        updates.append(cfg.lr * (m / (1.0 - cfg.beta1 ** t)) / (np.sqrt(v / (1.0 - cfg.beta2 ** t)) + cfg.eps))
    return updates
