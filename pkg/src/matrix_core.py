"""
Dense Matrix Primitives

This module defines the dense real matrix carrier (a 2-D float64 numpy array),
the seeded random stream used by randomized routines and synthetic data, and
the linear-algebra primitives the optimizer modules build on.
"""

import logging
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from src.errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

# Seed of the stream that completes rank-deficient bases when no stream is given
COMPLETION_SEED = 0

# Columns whose remaining norm is below this fraction of ||A||_F count as dependent
RANK_TOLERANCE = 1e-12


class SeededRng:
    """Portable seeded random stream.

    Wraps numpy's PCG64 bit generator, whose output sequence and normal sampler
    are fixed across platforms for a given seed.
    """

    def __init__(self, seed: int):
        """Initialize the stream.

        Args:
            seed: Non-negative 64-bit integer seed
        """
        seed = int(seed)
        if seed < 0 or seed >= 2 ** 64:
            raise ParameterError(f"seed must be a 64-bit non-negative integer, got {seed}")
        self.seed = seed
        self._generator = np.random.Generator(np.random.PCG64(seed))

    def standard_normal(self, rows: int, cols: int) -> Matrix:
        """Draw a rows x cols matrix of independent N(0, 1) samples."""
        return self._generator.standard_normal((rows, cols))

    def normal_array(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        """Draw an array of arbitrary shape from N(0, scale^2)."""
        return self._generator.standard_normal(tuple(shape)) * scale

    def integers(self, high: int) -> int:
        """Draw an integer uniformly from [0, high)."""
        return int(self._generator.integers(0, high))

    def choice(self, population: int, size: int) -> Tuple[int, ...]:
        """Draw `size` distinct integers uniformly from [0, population)."""
        picked = self._generator.choice(population, size=size, replace=False)
        return tuple(int(i) for i in picked)

    def spawn(self, key: int) -> "SeededRng":
        """Derive an independent stream identified by `key`."""
        state = np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)
        return SeededRng(int(state[0]))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def as_matrix(value: Union[Matrix, Sequence[Sequence[float]]], name: str = "matrix") -> Matrix:
    """Coerce a value to a 2-D float64 array.

    Args:
        value: Array-like input
        name: Name used in error messages

    Returns:
        The input as a float64 2-D array (no copy if already one)
    """
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {array.shape}")
    return array


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product of two matrices of the same shape."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape != b.shape:
        raise DimensionError(f"hadamard product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def frobenius_norm(a: Matrix) -> float:
    """Square root of the sum of squared entries."""
    return float(np.linalg.norm(as_matrix(a)))


def qr_thin(a: Matrix, rng: Optional[SeededRng] = None) -> Matrix:
    """Orthonormal basis of the column space via Householder reflections.

    A column whose remaining norm drops below RANK_TOLERANCE * ||A||_F is
    replaced by a random direction orthogonal to the columns already processed,
    so the result always has orthonormal columns. Column signs are chosen so the
    triangular factor has a non-negative diagonal.

    Args:
        a: Matrix with rows >= cols
        rng: Stream for completing rank-deficient inputs (defaults to COMPLETION_SEED)

    Returns:
        Matrix Q of the same shape as `a` with orthonormal columns
    """
    a = as_matrix(a, "qr input")
    m, n = a.shape
    if m < n:
        raise DimensionError(f"qr_thin needs rows >= cols, got {a.shape}")
    if n == 0:
        return np.zeros((m, 0))

    tolerance = RANK_TOLERANCE * frobenius_norm(a)
    work = a.copy()
    reflectors = []
    diagonal = np.empty(n)
    completed = 0

    for j in range(n):
        x = work[j:, j]
        norm = float(np.linalg.norm(x))
        if norm <= tolerance:
            if rng is None:
                rng = SeededRng(COMPLETION_SEED)
            work[j:, j] = rng.standard_normal(m - j, 1)[:, 0]
            x = work[j:, j]
            norm = float(np.linalg.norm(x))
            completed += 1

        v = x.copy()
        v[0] += math.copysign(norm, x[0])
        v /= np.linalg.norm(v)
        work[j:, j:] -= 2.0 * np.outer(v, v @ work[j:, j:])
        diagonal[j] = work[j, j]
        reflectors.append(v)

    if completed:
        logger.debug("qr_thin completed %d dependent column(s) of a %dx%d input", completed, m, n)

    q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    signs = np.where(diagonal < 0.0, -1.0, 1.0)
    return q * signs
