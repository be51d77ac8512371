"""Dense linear algebra and deterministic randomness used by every other module.

Vectors and matrices are plain float64 numpy arrays (1-D and 2-D). Randomness
goes through :class:`Rng`, a thin wrapper over numpy's Philox bit generator:
counter-based, so equal seeds give bitwise-equal streams on every platform,
and child streams can be split off by integer tag without correlation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NoConvergenceError, SingularMatrixError

Vec = np.ndarray
Mat = np.ndarray

PIVOT_RTOL = 1e-14


@dataclass
class Rng:
    """Deterministic random stream keyed by a 64-bit seed."""

    seed: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.generator = np.random.Generator(np.random.Philox(key=np.array([self.seed, 0], dtype=np.uint64)))

    def child(self, tag: int) -> "Rng":
        """Independent stream derived from (seed, tag); deterministic and order-free."""
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng.generator = np.random.Generator(np.random.Philox(key=np.array([self.seed, tag + 1], dtype=np.uint64)))
        return rng

    def normal(self, *shape: int) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, lo: float, hi: float, size: int | tuple) -> np.ndarray:
        return self.generator.uniform(lo, hi, size)


def sample_normal(rng: Rng, rows: int, cols: int) -> Mat:
    """i.i.d. standard-normal rows x cols matrix, deterministic given the seed."""
    if rows < 1 or cols < 1:
        raise ValueError(f"dimensions must be >= 1, got {rows}x{cols}")
    return rng.generator.standard_normal((rows, cols))


def solve_dense(a: Mat, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b by LU with partial pivoting.

    b may be a vector or a matrix of stacked right-hand sides. Raises
    SingularMatrixError when any pivot magnitude falls below
    PIVOT_RTOL * ||a||_inf.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    norm = np.linalg.norm(a, np.inf)
    if norm == 0.0:
        raise SingularMatrixError("zero matrix")
    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    threshold = PIVOT_RTOL * norm
    pivots = np.abs(np.diag(lu))
    if np.any(pivots < threshold):
        raise SingularMatrixError(
            f"pivot {pivots.min():.3e} below {threshold:.3e} (matrix numerically singular)"
        )
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def svd(a: Mat) -> tuple[Mat, Vec, Mat]:
    """Thin SVD: a = u @ diag(s) @ vt with s non-increasing and non-negative."""
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NoConvergenceError(f"SVD did not converge: {exc}") from exc
    return u, s, vt


def spectral_norm(a: Mat) -> float:
    """Largest singular value."""
    return float(svd(a)[1][0]) if min(a.shape) else 0.0
