"""Theoretical error bounds for the hypergradient approximation methods.

With q the contraction constant, D >= ||w(lam)||, L_E and L_Phi the
sup-bounds of ||grad1_E|| and ||d2phi|| over the 2D ball, nu1/nu2 the
Lipschitz constants of the two partial Jacobians of phi, and eta1/eta2 those
of the two partial gradients of E, the three theorems evaluate to

    c1 = (eta2 + eta1 * L_Phi / (1-q)) * D
    c2 = (nu2 + nu1 * L_Phi / (1-q)) * L_E * D
    c3 = L_E * L_Phi / (1-q)

    itd(t)           (c1 + c2 * t / q + c3) * q^t
    aid(rho, sigma)  (c1 + c2 / (1-q)) * rho + c3 * sigma
    aid_fp(t, k)     (c1 + c2 * (1-q^k)/(1-q)) * q^t + c3 * q^k

The general AID form replaces 1/(1-q) by 1/mu, the sup-bound of
||(I - d1phi)^{-1}||; mu = 1-q whenever a contraction constant is declared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConstantsError
from .lower import gd_map_constants
from .numkit import Mat, Vec, solve_dense, spectral_norm


@dataclass(frozen=True)
class BoundConstants:
    """Problem constants feeding the bound formulas. mu defaults to 1-q."""

    q: float
    D: float
    L_E: float
    L_Phi: float
    nu1: float
    nu2: float
    eta1: float
    eta2: float
    mu: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.q < 1.0):
            raise InvalidConstantsError(f"q must lie in [0, 1), got {self.q}")
        for name in ("D", "L_E", "L_Phi", "nu1", "nu2", "eta1", "eta2"):
            if getattr(self, name) < 0.0:
                raise InvalidConstantsError(f"{name} must be non-negative")
        if self.mu is not None and self.mu <= 0.0:
            raise InvalidConstantsError("mu must be positive")

    @property
    def inverse_bound_mu(self) -> float:
        return self.mu if self.mu is not None else 1.0 - self.q


@dataclass(frozen=True)
class BoundValues:
    """Assembled bound coefficients with per-method evaluators."""

    c1: float
    c2: float
    c3: float
    q: float
    mu: float

    @classmethod
    def from_constants(cls, c: BoundConstants) -> "BoundValues":
        gain = c.L_Phi / (1.0 - c.q)
        return cls(
            c1=(c.eta2 + c.eta1 * gain) * c.D,
            c2=(c.nu2 + c.nu1 * gain) * c.L_E * c.D,
            c3=c.L_E * gain,
            q=c.q,
            mu=c.inverse_bound_mu,
        )

    def itd(self, t: int) -> float:
        if self.q == 0.0:
            return self.c2 if t == 1 else 0.0  # limit of c2 * t * q^(t-1)
        return (self.c1 + self.c2 * t / self.q + self.c3) * self.q**t

    def aid(self, rho_t: float, sigma_k: float) -> float:
        return (self.c1 + self.c2 / (1.0 - self.q)) * rho_t + self.c3 * sigma_k

    def aid_fp(self, t: int, k: int) -> float:
        geo = (1.0 - self.q**k) / (1.0 - self.q)
        if k == t:
            # factored like itd(t) so the k=t ordering vs itd holds bitwise
            return (self.c1 + self.c2 * geo + self.c3) * self.q**t
        return (self.c1 + self.c2 * geo) * self.q**t + self.c3 * self.q**k


def itd_bound(c: BoundConstants, t: int) -> float:
    """(c1 + c2 t / q + c3) q^t for t >= 1."""
    if t < 1:
        raise ValueError("itd bound defined for t >= 1")
    return BoundValues.from_constants(c).itd(t)


def aid_bound(c: BoundConstants, rho_t: float, sigma_k: float) -> float:
    """General two-rate bound, with 1/mu in place of 1/(1-q) where mu is given.

    rho_t bounds the relative lower-level error at t, sigma_k the relative
    adjoint-solver error at k. With mu = 1-q this is exactly the contraction
    form (c1 + c2/(1-q)) rho + c3 sigma.
    """
    if not (0.0 <= rho_t <= 1.0):
        raise ValueError("rho_t must lie in [0, 1]")
    if sigma_k < 0.0:
        raise ValueError("sigma_k must be non-negative")
    mu = c.inverse_bound_mu
    gain = c.L_Phi / mu
    coeff = (c.eta2 + c.eta1 * gain + c.nu2 * c.L_E / mu + c.nu1 * gain * c.L_E / mu) * c.D
    return coeff * rho_t + c.L_E * gain * sigma_k


def aid_fp_bound(c: BoundConstants, t: int, k: int) -> float:
    """(c1 + c2 (1-q^k)/(1-q)) q^t + c3 q^k for t, k >= 1."""
    if t < 1 or k < 1:
        raise ValueError("aid-fp bound defined for t, k >= 1")
    return BoundValues.from_constants(c).aid_fp(t, k)


def constants_for_quadratic_br(
    X: Mat, y: Vec, Xv: Mat, yv: Vec, beta: float, lam: Vec
) -> BoundConstants:
    """Closed-form constant bundle for biased regularization with the GD map.

    The lower-level Hessian X^T X + beta I is lam-free, so the optimal step
    is constant in lam and both Jacobians of phi are constant in w
    (nu1 = nu2 = 0). E ignores lam (eta2 = 0) and grad1_E is affine in w
    (eta1 = ||Xv^T Xv||). d2phi = alpha*beta*I gives L_Phi = alpha*beta
    exactly, and D is the tightest admissible choice ||w(lam)||.
    """
    if beta <= 0.0:
        raise InvalidConstantsError("beta must be positive")
    gram = X.T @ X
    eigs = np.linalg.eigvalsh(gram)
    spec = gd_map_constants(float(eigs[0]) + beta, float(eigs[-1]) + beta)
    w_star = solve_dense(gram + beta * np.eye(gram.shape[0]), X.T @ y + beta * lam)
    D = float(np.linalg.norm(w_star))
    eta1 = spectral_norm(Xv.T @ Xv)
    L_E = eta1 * 2.0 * D + float(np.linalg.norm(Xv.T @ yv))
    return BoundConstants(
        q=spec.q,
        D=D,
        L_E=L_E,
        L_Phi=spec.alpha * beta,
        nu1=0.0,
        nu2=0.0,
        eta1=eta1,
        eta2=0.0,
    )
