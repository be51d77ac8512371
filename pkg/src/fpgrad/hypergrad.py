"""Hypergradient engines: unrolled reverse accumulation and implicit differentiation.

Two families:

* ``itd`` differentiates through the stored lower-level trajectory
  w_i = phi(w_{i-1}, lam) by reverse accumulation, returning the exact
  gradient of f_t(lam) = E(w_t(lam), lam).

* ``aid`` runs the lower level to w_t, approximately solves the adjoint
  linear system (I - d1phi(w_t)^T) v = grad1_E(w_t) with k iterations of a
  chosen solver (fixed-point iteration, CG, or CG on the normal equations),
  and assembles grad2_E(w_t) + d2phi(w_t)^T v.

All engines are deterministic and pure: equal inputs give bitwise-equal
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .bilevel import BilevelProblem, DenseJacobians, Hypergradient, Method
from .errors import CgBreakdownError, NotSymmetricError
from .lower import Trajectory, iterate
from .numkit import Vec

Operator = Callable[[Vec], Vec]


class Adjoint(str, Enum):
    """Solver for the adjoint linear system in AID."""

    FP = "fp"
    CG = "cg"
    CGNORMAL = "cgnormal"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AdjointSolveReport:
    """Approximate adjoint solution with iteration count and true residual.

    residual is ||(I - d1phi^T) v - b|| at exit, measured with one extra
    operator application (observability beats the saved matvec).
    """

    v: Vec
    iters: int
    residual: float


def itd(problem: BilevelProblem, lam: Vec, t: int, w0: Vec | None = None) -> Hypergradient:
    """Reverse accumulation through t unrolled fixed-point steps.

    Walking the stored trajectory backwards with the running adjoint a:

        a <- grad1_E(w_t);  g <- grad2_E(w_t)
        for i = t..1:  g += d2phi(w_{i-1})^T a;  a <- d1phi(w_{i-1})^T a

    which is the chain rule applied to w'_i = d1phi * w'_{i-1} + d2phi.
    """
    if t < 1:
        raise ValueError("itd needs t >= 1")
    traj = iterate(problem, lam, t, w0)
    return itd_from_trajectory(problem, traj)


def itd_from_trajectory(problem: BilevelProblem, traj: Trajectory) -> Hypergradient:
    """Reverse accumulation over an already-computed trajectory."""
    ws = traj.iterates
    lam = traj.lam
    t = len(ws) - 1
    adjoint = problem.grad1_E(ws[t], lam)
    grad = problem.grad2_E(ws[t], lam)
    for i in range(t, 0, -1):
        grad = grad + problem.d2phi_tvec(ws[i - 1], lam, adjoint)
        adjoint = problem.d1phi_tvec(ws[i - 1], lam, adjoint)
    return Hypergradient(grad, Method.ITD, t, 0)


def fp_adjoint(apply_At: Operator, b: Vec, k: int) -> AdjointSolveReport:
    """k fixed-point sweeps of v <- A^T v + b from v_0 = 0.

    Produces the k-term Neumann partial sum sum_{i<k} (A^T)^i b; converges
    linearly at rate ||A^T||^k when the map is a contraction.
    """
    if k < 1:
        raise ValueError("fp_adjoint needs k >= 1")
    v = b.copy()
    for _ in range(k - 1):
        v = apply_At(v) + b
    residual = float(np.linalg.norm(v - apply_At(v) - b))
    return AdjointSolveReport(v=v, iters=k, residual=residual)


def _cg_core(apply_op: Operator, b: Vec, k: int, tol: float) -> tuple[Vec, int]:
    """Plain CG from zero on an SPD operator; dual stop (k iterations or rel tol)."""
    v = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return v, 0
    iters = 0
    for _ in range(k):
        if np.sqrt(rr) <= 1e-15 * b_norm:
            break  # converged to the rounding floor; further directions are noise
        ap = apply_op(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise CgBreakdownError(f"non-positive curvature p^T A p = {pap:.3e}")
        step = rr / pap
        v = v + step * p
        r = r - step * ap
        iters += 1
        rr_new = float(r @ r)
        if tol > 0.0 and np.sqrt(rr_new) <= tol * b_norm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return v, iters


def cg(apply_A: Operator, b: Vec, k: int, tol: float = 0.0) -> AdjointSolveReport:
    """Conjugate gradient on an SPD system A v = b, from v_0 = 0.

    Stops at k iterations or when the recursive residual drops below
    tol * ||b|| (tol = 0 keeps a pure iteration cap, so fixed-k experiment
    curves replicate exactly). The reported residual is recomputed as
    ||A v - b|| with one extra application.
    """
    if k < 1:
        raise ValueError("cg needs k >= 1")
    v, iters = _cg_core(apply_A, b, k, tol)
    residual = float(np.linalg.norm(apply_A(v) - b))
    return AdjointSolveReport(v=v, iters=iters, residual=residual)


def cg_normal(
    apply_A: Operator, apply_At: Operator, b: Vec, k: int, tol: float = 0.0
) -> AdjointSolveReport:
    """CG on the normal equations A^T A v = A^T b, for nonsymmetric invertible A.

    Each iteration costs one apply_A and one apply_At. The reported residual
    is that of the original system, ||A v - b||.
    """
    if k < 1:
        raise ValueError("cg_normal needs k >= 1")
    bn = apply_At(b)
    v, iters = _cg_core(lambda x: apply_At(apply_A(x)), bn, k, tol)
    residual = float(np.linalg.norm(apply_A(v) - b))
    return AdjointSolveReport(v=v, iters=iters, residual=residual)


def aid(
    problem: BilevelProblem,
    lam: Vec,
    t: int,
    k: int,
    adjoint: Adjoint = Adjoint.FP,
    w0: Vec | None = None,
    tol: float = 0.0,
    lower: Callable[[Vec, int, Vec | None], Vec] | None = None,
) -> tuple[Hypergradient, AdjointSolveReport]:
    """Approximate implicit differentiation (two-stage scheme).

    1. w_t from t steps of the lower-level iteration (or of ``lower``, an
       alternative solver callback -- the scheme is agnostic about how w_t is
       produced).
    2. k solver iterations on (I - d1phi(w_t)^T) v = grad1_E(w_t) from v_0=0.
    3. grad2_E(w_t) + d2phi(w_t)^T v_{t,k}.

    Plain CG requires symmetric_d1phi; otherwise use Adjoint.CGNORMAL.
    """
    if t < 1 or k < 1:
        raise ValueError("aid needs t >= 1 and k >= 1")
    w_t = lower(lam, t, w0) if lower is not None else iterate(problem, lam, t, w0).final
    b = problem.grad1_E(w_t, lam)

    def apply_system(v: Vec) -> Vec:
        return v - problem.d1phi_tvec(w_t, lam, v)

    if adjoint == Adjoint.FP:
        report = fp_adjoint(lambda v: problem.d1phi_tvec(w_t, lam, v), b, k)
        method = Method.AID_FP
    elif adjoint == Adjoint.CG:
        if not problem.symmetric_d1phi:
            raise NotSymmetricError("plain CG needs symmetric_d1phi; use CGNORMAL")
        report = cg(apply_system, b, k, tol)
        method = Method.AID_CG
    elif adjoint == Adjoint.CGNORMAL:
        report = cg_normal(
            apply_system,
            lambda v: v - problem.apply_d1phi(w_t, lam, v),
            b,
            k,
            tol,
        )
        method = Method.AID_CGN
    else:
        raise ValueError(f"unknown adjoint solver {adjoint!r}")

    grad = problem.grad2_E(w_t, lam) + problem.d2phi_tvec(w_t, lam, report.v)
    return Hypergradient(grad, method, t, report.iters), report


def fp_forward_check(
    problem: BilevelProblem,
    lam: Vec,
    t: int,
    k: int,
    dense: DenseJacobians | None = None,
    w0: Vec | None = None,
) -> Vec:
    """Forward-accumulation counterpart of the FP adjoint, as a cross-oracle.

    Runs the dense sensitivity recursion u <- d1phi(w_t) u + d2phi(w_t) for k
    steps from u = 0 and returns u^T grad1_E(w_t), which must equal the
    d2phi^T v_{t,k} contribution of aid(..., Adjoint.FP) exactly.
    """
    dense = dense if dense is not None else problem.dense
    if dense is None or dense.d2phi is None:
        raise ValueError("fp_forward_check needs dense d1phi and d2phi callbacks")
    w_t = iterate(problem, lam, t, w0).final
    d1 = dense.d1phi(w_t, lam)
    d2 = dense.d2phi(w_t, lam)
    u = np.zeros_like(d2)
    for _ in range(k):
        u = d1 @ u + d2
    return u.T @ problem.grad1_E(w_t, lam)
