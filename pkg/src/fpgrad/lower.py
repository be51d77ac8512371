"""Contraction maps from strongly convex objectives, and lower-level iteration.

Given a mu-strongly convex, L-smooth inner objective, the one-step gradient
descent map ``w - alpha * grad(w)`` with alpha = 2/(mu+L) is a contraction
with constant q = (kappa-1)/(kappa+1), kappa = L/mu. The heavy-ball update is
exposed as a fixed-point map on the doubled state (w, w_prev) so the same
trajectory machinery (and ITD) applies; only the leading w-part is the model
state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bilevel import BilevelProblem
from .errors import DivergedError, InvalidConstantsError
from .numkit import Vec

DIVERGENCE_GUARD = 1e12


@dataclass(frozen=True)
class GdMapSpec:
    """Step size and contraction constant of the optimal GD map."""

    mu: float
    L: float
    alpha: float
    q: float


@dataclass(frozen=True)
class HeavyBallSpec:
    """Optimal heavy-ball step size and momentum for a strongly convex quadratic."""

    mu: float
    L: float
    alpha: float
    beta: float


def _check_mu_L(mu: float, L: float) -> None:
    if not (0.0 < mu <= L):
        raise InvalidConstantsError(f"need 0 < mu <= L, got mu={mu}, L={L}")


def gd_map_constants(mu: float, L: float) -> GdMapSpec:
    """alpha = 2/(mu+L), q = (kappa-1)/(kappa+1)."""
    _check_mu_L(mu, L)
    alpha = 2.0 / (mu + L)
    q = (L - mu) / (L + mu)
    return GdMapSpec(mu=mu, L=L, alpha=alpha, q=q)


def heavy_ball_constants(mu: float, L: float) -> HeavyBallSpec:
    """Polyak's optimal pair: alpha = 4/(sqrt(L)+sqrt(mu))^2, beta = ((sqrt(k)-1)/(sqrt(k)+1))^2."""
    _check_mu_L(mu, L)
    alpha = 4.0 / (math.sqrt(L) + math.sqrt(mu)) ** 2
    sk = math.sqrt(L / mu)
    beta = ((sk - 1.0) / (sk + 1.0)) ** 2
    return HeavyBallSpec(mu=mu, L=L, alpha=alpha, beta=beta)


@dataclass(frozen=True)
class Trajectory:
    """Lower-level iterates w_0 .. w_t for one lam (stored for reverse accumulation)."""

    iterates: list[Vec]
    lam: Vec

    @property
    def final(self) -> Vec:
        return self.iterates[-1]

    def __len__(self) -> int:
        return len(self.iterates)


def iterate(problem: BilevelProblem, lam: Vec, t: int, w0: Vec | None = None) -> Trajectory:
    """Apply problem.phi t times from w0 (zero by default), keeping every iterate.

    Raises DivergedError if any iterate norm exceeds 1e12; the guard is meant
    for catastrophic blow-up only, so transient heavy-ball growth passes.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    w = np.zeros(problem.dim_w) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    iterates = [w]
    for i in range(t):
        w = problem.phi(w, lam)
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) > DIVERGENCE_GUARD:
            raise DivergedError(f"lower-level iterate {i + 1} exceeded the divergence guard")
        iterates.append(w)
    return Trajectory(iterates=iterates, lam=lam)


@dataclass(frozen=True)
class LowerObjective:
    """Smooth strongly convex inner objective, described by its derivatives.

    grad(w, lam)         gradient w.r.t. w
    hvp(w, lam, v)       Hessian-vector product (the Hessian is symmetric)
    cross_tvec(w, lam, v) transposed mixed-derivative product, an n-vector
    mu(lam), L(lam)      strong convexity / smoothness constants
    """

    grad: Callable[[Vec, Vec], Vec]
    hvp: Callable[[Vec, Vec, Vec], Vec]
    cross_tvec: Callable[[Vec, Vec, Vec], Vec]
    mu: Callable[[Vec], float]
    L: Callable[[Vec], float]


@dataclass(frozen=True)
class OuterObjective:
    """Outer objective E and its two partial gradients."""

    value: Callable[[Vec, Vec], float]
    grad1: Callable[[Vec, Vec], Vec]
    grad2: Callable[[Vec, Vec], Vec]


def gd_problem(
    lower: LowerObjective,
    outer: OuterObjective,
    dim_w: int,
    dim_lambda: int,
    exact_fixed_point: Callable[[Vec], Vec] | None = None,
    dense=None,
    name: str = "",
) -> BilevelProblem:
    """Bilevel problem whose map is one optimal-step gradient descent step.

    The map Jacobian I - alpha * hessian is symmetric, so plain CG applies to
    the adjoint system. The cross-Jacobian product drops the grad-alpha term.
    """

    def alpha(lam: Vec) -> float:
        return gd_map_constants(lower.mu(lam), lower.L(lam)).alpha

    return BilevelProblem(
        dim_w=dim_w,
        dim_lambda=dim_lambda,
        phi=lambda w, lam: w - alpha(lam) * lower.grad(w, lam),
        d1phi_tvec=lambda w, lam, v: v - alpha(lam) * lower.hvp(w, lam, v),
        d2phi_tvec=lambda w, lam, v: -alpha(lam) * lower.cross_tvec(w, lam, v),
        grad1_E=outer.grad1,
        grad2_E=outer.grad2,
        outer_E=outer.value,
        exact_fixed_point=exact_fixed_point,
        contraction_q=lambda lam: gd_map_constants(lower.mu(lam), lower.L(lam)).q,
        symmetric_d1phi=True,
        dense=dense,
        name=name,
    )


def heavy_ball_problem(
    lower: LowerObjective,
    outer: OuterObjective,
    dim_w: int,
    dim_lambda: int,
    exact_fixed_point: Callable[[Vec], Vec] | None = None,
    name: str = "",
) -> BilevelProblem:
    """Heavy-ball as a fixed-point map on the doubled state s = (w, w_prev).

    s+ = (w - alpha*grad(w) + beta*(w - w_prev), w). The map is a contraction
    only in a problem-dependent weighted norm, so no Euclidean contraction
    constant is declared and Theorem-style bounds are never evaluated on
    heavy-ball runs. The outer objective is lifted to read the leading block.
    """

    def constants(lam: Vec) -> HeavyBallSpec:
        return heavy_ball_constants(lower.mu(lam), lower.L(lam))

    def split(s: Vec) -> tuple[Vec, Vec]:
        return s[:dim_w], s[dim_w:]

    def phi(s: Vec, lam: Vec) -> Vec:
        w, wp = split(s)
        spec = constants(lam)
        w_new = w - spec.alpha * lower.grad(w, lam) + spec.beta * (w - wp)
        return np.concatenate([w_new, w])

    def d1phi_tvec(s: Vec, lam: Vec, v: Vec) -> Vec:
        w, _ = split(s)
        v1, v2 = split(v)
        spec = constants(lam)
        top = (1.0 + spec.beta) * v1 - spec.alpha * lower.hvp(w, lam, v1) + v2
        return np.concatenate([top, -spec.beta * v1])

    def d1phi_vec(s: Vec, lam: Vec, v: Vec) -> Vec:
        w, _ = split(s)
        v1, v2 = split(v)
        spec = constants(lam)
        top = (1.0 + spec.beta) * v1 - spec.alpha * lower.hvp(w, lam, v1) - spec.beta * v2
        return np.concatenate([top, v1])

    def d2phi_tvec(s: Vec, lam: Vec, v: Vec) -> Vec:
        w, _ = split(s)
        v1, _ = split(v)
        return -constants(lam).alpha * lower.cross_tvec(w, lam, v1)

    def lifted_fp(lam: Vec) -> Vec:
        w = exact_fixed_point(lam)
        return np.concatenate([w, w])

    zeros_tail = np.zeros(dim_w)
    return BilevelProblem(
        dim_w=2 * dim_w,
        dim_lambda=dim_lambda,
        phi=phi,
        d1phi_tvec=d1phi_tvec,
        d2phi_tvec=d2phi_tvec,
        grad1_E=lambda s, lam: np.concatenate([outer.grad1(s[:dim_w], lam), zeros_tail]),
        grad2_E=lambda s, lam: outer.grad2(s[:dim_w], lam),
        outer_E=lambda s, lam: outer.value(s[:dim_w], lam),
        exact_fixed_point=lifted_fp if exact_fixed_point is not None else None,
        contraction_q=None,
        symmetric_d1phi=False,
        d1phi_vec=d1phi_vec,
        name=name,
    )
