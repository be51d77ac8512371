"""Shared fixtures: toy problems, random instances, and independent oracles."""

import numpy as np

from fpgrad import BilevelProblem, DenseJacobians, Rng, solve_dense
from fpgrad.lower import iterate


def rel_err(estimate: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - reference) / (1.0 + np.linalg.norm(reference)))


def toy_problem() -> BilevelProblem:
    """phi = 0.5 w + lam, E = w^2 / 2; w(lam) = 2 lam and grad f = 4 lam."""
    return BilevelProblem(
        dim_w=1,
        dim_lambda=1,
        phi=lambda w, lam: 0.5 * w + lam,
        d1phi_tvec=lambda w, lam, v: 0.5 * v,
        d2phi_tvec=lambda w, lam, v: v.copy(),
        grad1_E=lambda w, lam: w.copy(),
        grad2_E=lambda w, lam: np.zeros(1),
        outer_E=lambda w, lam: 0.5 * float(w @ w),
        exact_fixed_point=lambda lam: 2.0 * lam,
        contraction_q=lambda lam: 0.5,
        symmetric_d1phi=True,
        dense=DenseJacobians(
            d1phi=lambda w, lam: np.array([[0.5]]),
            d2phi=lambda w, lam: np.array([[1.0]]),
        ),
        name="toy",
    )


def random_linear_problem(rng: Rng, d: int, n: int, q: float, symmetric: bool = False) -> BilevelProblem:
    """Affine contraction phi = M w + P lam + r with ||M|| = q exactly.

    E = 0.5 ||w - a||^2 + lam^T B w + 0.5 ||lam||^2 exercises every gradient
    path (grad2_E and the cross term are nonzero).
    """
    m = rng.normal(d, d)
    if symmetric:
        m = 0.5 * (m + m.T)
    m *= q / np.linalg.norm(m, 2)
    p_mat = rng.normal(d, n)
    r = rng.normal(d)
    a = rng.normal(d)
    b_mat = rng.normal(n, d)

    return BilevelProblem(
        dim_w=d,
        dim_lambda=n,
        phi=lambda w, lam: m @ w + p_mat @ lam + r,
        d1phi_tvec=lambda w, lam, v: m.T @ v,
        d2phi_tvec=lambda w, lam, v: p_mat.T @ v,
        grad1_E=lambda w, lam: w - a + b_mat.T @ lam,
        grad2_E=lambda w, lam: b_mat @ w + lam,
        outer_E=lambda w, lam: float(
            0.5 * np.sum((w - a) ** 2) + lam @ (b_mat @ w) + 0.5 * lam @ lam
        ),
        exact_fixed_point=lambda lam: solve_dense(np.eye(d) - m, p_mat @ lam + r),
        contraction_q=lambda lam: q,
        symmetric_d1phi=symmetric,
        d1phi_vec=lambda w, lam, v: m @ v,
        dense=DenseJacobians(d1phi=lambda w, lam: m, d2phi=lambda w, lam: p_mat),
        name="linear",
    )


def forward_mode_itd(problem: BilevelProblem, lam: np.ndarray, t: int) -> np.ndarray:
    """Independent ITD oracle: dense forward sensitivity recursion.

    Propagates W'_i = d1phi(w_{i-1}) W'_{i-1} + d2phi(w_{i-1}) from W'_0 = 0
    and assembles grad2_E + W'^T grad1_E, touching none of the reverse path.
    """
    dense = problem.dense
    traj = iterate(problem, lam, t)
    sens = np.zeros((problem.dim_w, problem.dim_lambda))
    for i in range(1, t + 1):
        w_prev = traj.iterates[i - 1]
        sens = dense.d1phi(w_prev, lam) @ sens + dense.d2phi(w_prev, lam)
    w_t = traj.final
    return problem.grad2_E(w_t, lam) + sens.T @ problem.grad1_E(w_t, lam)


def random_spd(rng: Rng, d: int, cond: float) -> np.ndarray:
    """SPD matrix with eigenvalues log-spaced over [1, cond]."""
    q_mat, _ = np.linalg.qr(rng.normal(d, d))
    eigs = np.geomspace(1.0, cond, d)
    return (q_mat * eigs) @ q_mat.T
