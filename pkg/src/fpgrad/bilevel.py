"""Bilevel-problem abstraction and reference hypergradient oracles.

A bilevel problem is

    min_lam  f(lam) = E(w(lam), lam)   subject to   w(lam) = phi(w(lam), lam),

described here as a bundle of callbacks: the map ``phi``, its two transposed
Jacobian-vector products, and the two partial gradients of the outer
objective E. The products are all the iterative engines need; dense Jacobian
callbacks are an optional extension used only by the exact oracle and the
bound calculators.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import SingularMatrixError  # noqa: F401  (re-exported error of exact_hypergrad)
from .numkit import Mat, Rng, Vec, solve_dense


class Method(str, Enum):
    """How a hypergradient estimate was produced."""

    ITD = "itd"
    AID_FP = "aid-fp"
    AID_CG = "aid-cg"
    AID_CGN = "aid-cgn"
    EXACT = "exact"
    FD = "fd"

    def __str__(self) -> str:  # CSV-friendly
        return self.value


@dataclass(frozen=True)
class Hypergradient:
    """An estimate of the gradient of f(lam), tagged with its provenance."""

    grad: Vec
    method: Method
    t: int
    k: int


@dataclass(frozen=True)
class DenseJacobians:
    """Dense partial Jacobians of phi, for oracles and bound constants only.

    d1phi(w, lam) -> d x d matrix;  d2phi(w, lam) -> d x n matrix (optional).
    """

    d1phi: Callable[[Vec, Vec], Mat]
    d2phi: Callable[[Vec, Vec], Mat] | None = None


@dataclass(frozen=True)
class BilevelProblem:
    """Callback bundle defining one bilevel problem instance.

    All callbacks must be pure so a single instance can be evaluated
    concurrently. ``d1phi_tvec(w, lam, v)`` applies the transposed Jacobian of
    phi w.r.t. w; ``d2phi_tvec`` the one w.r.t. lam (an n-vector). For
    problems built from gradient-descent maps, d2phi_tvec drops the
    step-size-gradient term (it vanishes at the fixed point, so the exact
    hypergradient is unaffected).

    ``d1phi_vec`` is the untransposed product, required only by the
    normal-equations CG solver on non-symmetric problems; when
    ``symmetric_d1phi`` is true it defaults to ``d1phi_tvec``.
    """

    dim_w: int
    dim_lambda: int
    phi: Callable[[Vec, Vec], Vec]
    d1phi_tvec: Callable[[Vec, Vec, Vec], Vec]
    d2phi_tvec: Callable[[Vec, Vec, Vec], Vec]
    grad1_E: Callable[[Vec, Vec], Vec]
    grad2_E: Callable[[Vec, Vec], Vec]
    outer_E: Callable[[Vec, Vec], float]
    exact_fixed_point: Callable[[Vec], Vec] | None = None
    contraction_q: Callable[[Vec], float] | None = None
    symmetric_d1phi: bool = False
    d1phi_vec: Callable[[Vec, Vec, Vec], Vec] | None = None
    dense: DenseJacobians | None = None
    name: str = ""

    def apply_d1phi(self, w: Vec, lam: Vec, v: Vec) -> Vec:
        """Untransposed Jacobian-vector product, falling back on symmetry."""
        if self.d1phi_vec is not None:
            return self.d1phi_vec(w, lam, v)
        if self.symmetric_d1phi:
            return self.d1phi_tvec(w, lam, v)
        raise NotImplementedError(
            "problem declares a non-symmetric map Jacobian and no d1phi_vec callback"
        )


def exact_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    dense: DenseJacobians | None = None,
    route: str = "adjoint",
) -> Hypergradient:
    """Exact hypergradient at the true fixed point, via a dense direct solve.

    route="adjoint" solves (I - d1phi^T) v = grad1_E and assembles
    grad2_E + d2phi^T v; route="forward" solves for the full sensitivity
    W' = (I - d1phi)^{-1} d2phi and assembles grad2_E + W'^T grad1_E
    (needs the dense d2phi callback). Both routes agree to rounding.
    """
    dense = dense if dense is not None else problem.dense
    if problem.exact_fixed_point is None:
        raise ValueError("exact_hypergrad needs an exact_fixed_point callback")
    if dense is None:
        raise ValueError("exact_hypergrad needs dense Jacobian callbacks")
    w = problem.exact_fixed_point(lam)
    d1 = dense.d1phi(w, lam)
    eye = np.eye(problem.dim_w)
    if route == "adjoint":
        v = solve_dense(eye - d1.T, problem.grad1_E(w, lam))
        grad = problem.grad2_E(w, lam) + problem.d2phi_tvec(w, lam, v)
    elif route == "forward":
        if dense.d2phi is None:
            raise ValueError("forward route needs the dense d2phi callback")
        w_prime = solve_dense(eye - d1, dense.d2phi(w, lam))
        grad = problem.grad2_E(w, lam) + w_prime.T @ problem.grad1_E(w, lam)
    else:
        raise ValueError(f"unknown route {route!r}")
    return Hypergradient(grad, Method.EXACT, 0, 0)


def fd_hypergrad(
    problem: BilevelProblem,
    lam: Vec,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> Hypergradient:
    """Central finite differences of f(lam) = E(w(lam), lam), coordinate-wise.

    Steps are proportional to the coordinate magnitude, h * max(|lam_i|, 1e-2),
    which keeps truncation error O(h^2) relative on badly scaled coordinates
    (KRR bandwidths are O(1e-3)) without letting cancellation noise blow up
    near zero. ``coords`` restricts the evaluation to a subset of coordinates
    (the remaining entries are returned as zero); used where the full sweep is
    out of budget.
    """
    if problem.exact_fixed_point is None:
        raise ValueError("fd_hypergrad needs an exact_fixed_point callback")

    def f(x: Vec) -> float:
        return float(problem.outer_E(problem.exact_fixed_point(x), x))

    grad = np.zeros(problem.dim_lambda)
    indices = range(problem.dim_lambda) if coords is None else np.asarray(coords, dtype=int)
    for i in indices:
        step = h * max(abs(float(lam[i])), 1e-2)
        lp = lam.copy()
        lm = lam.copy()
        lp[i] += step
        lm[i] -= step
        grad[i] = (f(lp) - f(lm)) / (2.0 * step)
    return Hypergradient(grad, Method.FD, 0, 0)


def check_contraction(problem: BilevelProblem, lam: Vec, samples: int, rng: Rng) -> float:
    """Largest observed ||phi(w1) - phi(w2)|| / ||w1 - w2|| over sampled pairs.

    A lower bound on the true Lipschitz constant of phi(., lam).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    worst = 0.0
    for _ in range(samples):
        w1 = rng.normal(problem.dim_w)
        w2 = rng.normal(problem.dim_w)
        gap = np.linalg.norm(w1 - w2)
        if gap == 0.0:
            continue
        ratio = np.linalg.norm(problem.phi(w1, lam) - problem.phi(w2, lam)) / gap
        worst = max(worst, float(ratio))
    return worst
