"""Problem-abstraction contracts and the exact/fd oracle pair."""

import dataclasses

import numpy as np
import pytest

from fpgrad import (
    Method,
    Rng,
    SingularMatrixError,
    check_contraction,
    exact_hypergrad,
    fd_hypergrad,
    gen_data,
    make_br,
    make_krr,
)
from fpgrad.bilevel import BilevelProblem

from helpers import rel_err, toy_problem


@pytest.fixture(scope="module")
def br_tiny():
    data = gen_data("br", seed=3, p=20)
    problem = make_br(data, beta=1.0)
    lam = Rng(7).uniform(-5.0, 5.0, 20)
    return problem, lam


@pytest.fixture(scope="module")
def krr_tiny():
    data = gen_data("krr", seed=5, n_train=10, n_val=10)
    problem = make_krr(data)
    lam = Rng(9).uniform(0.0005, 0.005, 101)
    return problem, lam


class TestExactHypergrad:
    def test_scalar_toy(self):
        got = exact_hypergrad(toy_problem(), np.array([1.0]))
        assert got.method == Method.EXACT
        np.testing.assert_allclose(got.grad, [4.0], rtol=0, atol=1e-14)

    def test_route_invariance(self, br_tiny, krr_tiny):
        for problem, lam in (br_tiny, krr_tiny, (toy_problem(), np.array([1.0]))):
            adj = exact_hypergrad(problem, lam, route="adjoint").grad
            fwd = exact_hypergrad(problem, lam, route="forward").grad
            assert np.linalg.norm(adj - fwd) <= 1e-10 * (1.0 + np.linalg.norm(adj))

    def test_br_matches_fd(self, br_tiny):
        problem, lam = br_tiny
        exact = exact_hypergrad(problem, lam).grad
        fd = fd_hypergrad(problem, lam).grad
        assert rel_err(fd, exact) <= 1e-5

    def test_neumann_series_oracle(self, br_tiny):
        # (I - d1phi^T)^{-1} b as a truncated Neumann sum, valid since q < 1
        problem, lam = br_tiny
        w = problem.exact_fixed_point(lam)
        d1t = problem.dense.d1phi(w, lam).T
        term = problem.grad1_E(w, lam)
        total = term.copy()
        for _ in range(200):
            term = d1t @ term
            total += term
        series = problem.grad2_E(w, lam) + problem.d2phi_tvec(w, lam, total)
        exact = exact_hypergrad(problem, lam).grad
        assert np.linalg.norm(series - exact) <= 1e-8

    def test_singular_system_raises(self):
        # phi = w makes I - d1phi^T exactly singular
        problem = dataclasses.replace(
            toy_problem(),
            phi=lambda w, lam: w.copy(),
            d1phi_tvec=lambda w, lam, v: v.copy(),
            dense=dataclasses.replace(toy_problem().dense, d1phi=lambda w, lam: np.eye(1)),
        )
        with pytest.raises(SingularMatrixError):
            exact_hypergrad(problem, np.array([1.0]))


class TestFdHypergrad:
    def test_scalar_toy_quadratic(self):
        got = fd_hypergrad(toy_problem(), np.array([1.0]), h=1e-5)
        assert got.method == Method.FD
        np.testing.assert_allclose(got.grad, [4.0], rtol=0, atol=1e-8)

    def test_constant_objective_gives_zero(self):
        problem = dataclasses.replace(
            toy_problem(), outer_E=lambda w, lam: 1.5, grad1_E=lambda w, lam: np.zeros(1)
        )
        np.testing.assert_allclose(fd_hypergrad(problem, np.array([1.0])).grad, [0.0], atol=1e-12)

    def test_coordinate_subset(self, br_tiny):
        problem, lam = br_tiny
        coords = np.array([0, 3, 11])
        fd = fd_hypergrad(problem, lam, coords=coords).grad
        exact = exact_hypergrad(problem, lam).grad
        mask = np.zeros(20, dtype=bool)
        mask[coords] = True
        assert np.all(fd[~mask] == 0.0)
        assert np.linalg.norm(fd[coords] - exact[coords]) <= 1e-5 * (1 + np.linalg.norm(exact))


class TestOracleAgreement:
    def test_closed_form_problems_within_1e4(self, br_tiny, krr_tiny):
        for problem, lam in (br_tiny, krr_tiny):
            exact = exact_hypergrad(problem, lam).grad
            fd = fd_hypergrad(problem, lam, h=1e-5).grad
            assert rel_err(fd, exact) <= 1e-4


class TestLinearity:
    @pytest.mark.parametrize("which", ["d1", "d2"])
    def test_transposed_products_linear(self, br_tiny, krr_tiny, which):
        for problem, lam in (br_tiny, krr_tiny):
            rng = Rng(11)
            op = problem.d1phi_tvec if which == "d1" else problem.d2phi_tvec
            for _ in range(100):
                w = rng.normal(problem.dim_w)
                u = rng.normal(problem.dim_w)
                v = rng.normal(problem.dim_w)
                a, b = 0.7, -1.3
                lhs = op(w, lam, a * u + b * v)
                rhs = a * op(w, lam, u) + b * op(w, lam, v)
                scale = 1.0 + np.linalg.norm(rhs)
                assert np.linalg.norm(lhs - rhs) <= 1e-10 * scale


class TestCheckContraction:
    def test_affine_map_exact_ratio(self):
        problem = toy_problem()
        est = check_contraction(problem, np.array([1.0]), samples=10, rng=Rng(0))
        assert est <= 0.5 + 1e-12
        assert est == pytest.approx(0.5, abs=1e-12)

    def test_identity_map(self):
        problem = dataclasses.replace(toy_problem(), phi=lambda w, lam: w.copy())
        assert check_contraction(problem, np.array([0.0]), 5, Rng(1)) == pytest.approx(1.0)

    def test_gd_map_below_analytic_q(self, br_tiny):
        problem, lam = br_tiny
        est = check_contraction(problem, lam, samples=25, rng=Rng(2))
        assert est <= problem.contraction_q(lam) + 1e-9

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            check_contraction(toy_problem(), np.array([1.0]), 0, Rng(0))


def test_callbacks_are_pure(br_tiny):
    problem, lam = br_tiny
    w = Rng(4).normal(problem.dim_w)
    w_copy = w.copy()
    lam_copy = lam.copy()
    problem.phi(w, lam)
    problem.d1phi_tvec(w, lam, w)
    problem.grad1_E(w, lam)
    assert np.array_equal(w, w_copy) and np.array_equal(lam, lam_copy)


def test_problem_requires_oracle_ingredients():
    bare = dataclasses.replace(toy_problem(), exact_fixed_point=None)
    with pytest.raises(ValueError):
        exact_hypergrad(bare, np.array([1.0]))
    with pytest.raises(ValueError):
        fd_hypergrad(bare, np.array([1.0]))
    no_dense = dataclasses.replace(toy_problem(), dense=None)
    with pytest.raises(ValueError):
        exact_hypergrad(no_dense, np.array([1.0]))


def test_apply_d1phi_requires_symmetry_or_callback():
    asym = dataclasses.replace(toy_problem(), symmetric_d1phi=False)
    with pytest.raises(NotImplementedError):
        asym.apply_d1phi(np.zeros(1), np.zeros(1), np.ones(1))
    assert isinstance(asym, BilevelProblem)
