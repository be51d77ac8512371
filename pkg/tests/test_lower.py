"""Map constants, iteration, and heavy-ball lifting."""

import dataclasses

import numpy as np
import pytest

from fpgrad import (
    DivergedError,
    InvalidConstantsError,
    Rng,
    exact_hypergrad,
    gd_map_constants,
    gen_data,
    heavy_ball_constants,
    iterate,
    make_br,
)
from fpgrad.hypergrad import itd
from fpgrad.lower import LowerObjective, OuterObjective, heavy_ball_problem

from helpers import toy_problem


class TestGdConstants:
    def test_examples(self):
        spec = gd_map_constants(2.0, 10.0)
        assert spec.alpha == pytest.approx(1.0 / 6.0, abs=1e-15)
        assert spec.q == pytest.approx(2.0 / 3.0, abs=1e-15)
        spec = gd_map_constants(1.0, 1.0)
        assert (spec.alpha, spec.q) == (1.0, 0.0)
        spec = gd_map_constants(1.0, 9.0)
        assert spec.alpha == pytest.approx(0.2) and spec.q == pytest.approx(0.8)

    def test_invalid(self):
        with pytest.raises(InvalidConstantsError):
            gd_map_constants(0.0, 1.0)
        with pytest.raises(InvalidConstantsError):
            gd_map_constants(2.0, 1.0)


class TestHeavyBallConstants:
    def test_examples(self):
        spec = heavy_ball_constants(1.0, 9.0)
        assert spec.alpha == pytest.approx(0.25) and spec.beta == pytest.approx(0.25)
        spec = heavy_ball_constants(4.0, 4.0)
        assert spec.beta == 0.0 and spec.alpha == pytest.approx(0.25)  # reduces to GD at 1/L
        spec = heavy_ball_constants(1.0, 100.0)
        assert spec.alpha == pytest.approx(4.0 / 121.0)
        assert spec.beta == pytest.approx((9.0 / 11.0) ** 2)

    def test_invalid(self):
        with pytest.raises(InvalidConstantsError):
            heavy_ball_constants(-1.0, 2.0)


class TestIterate:
    def test_geometric_recursion(self):
        problem = dataclasses.replace(toy_problem(), phi=lambda w, lam: 0.5 * w + 1.0)
        traj = iterate(problem, np.zeros(1), 3)
        got = np.array([w[0] for w in traj.iterates])
        np.testing.assert_allclose(got, [0.0, 1.0, 1.5, 1.75], rtol=0, atol=0)

    def test_t_zero(self):
        traj = iterate(toy_problem(), np.array([1.0]), 0)
        assert len(traj) == 1 and traj.final[0] == 0.0

    def test_default_start_is_zero_and_custom_start(self):
        problem = toy_problem()
        lam = np.array([2.0])
        assert iterate(problem, lam, 0).final[0] == 0.0
        assert iterate(problem, lam, 0, w0=np.array([3.0])).final[0] == 3.0

    def test_br_reaches_closed_form_at_linear_rate(self):
        # paper-dimension instance: q**200 * ||w*|| stays far above the
        # float64 floor, so the rate statement is checkable as written
        data = gen_data("br", seed=3)
        problem = make_br(data, beta=1.0)
        lam = Rng(7).uniform(-5.0, 5.0, 100)
        w_star = problem.exact_fixed_point(lam)
        q = problem.contraction_q(lam)
        final = iterate(problem, lam, 200).final
        assert np.linalg.norm(final - w_star) <= q**200 * np.linalg.norm(w_star) * (1 + 1e-9)

    def test_contraction_decay_per_step(self):
        data = gen_data("br", seed=4, p=15)
        problem = make_br(data, beta=2.0)
        lam = Rng(1).uniform(-5.0, 5.0, 15)
        w_star = problem.exact_fixed_point(lam)
        q = problem.contraction_q(lam)
        traj = iterate(problem, lam, 60)
        errs = [np.linalg.norm(w - w_star) for w in traj.iterates]
        for before, after in zip(errs, errs[1:]):
            assert after <= q * before + 1e-12

    def test_divergence_guard(self):
        runaway = dataclasses.replace(toy_problem(), phi=lambda w, lam: 10.0 * w)
        with pytest.raises(DivergedError):
            iterate(runaway, np.zeros(1), 20, w0=np.array([1.0]))

    def test_deterministic_bitwise(self):
        data = gen_data("br", seed=5, p=10)
        problem = make_br(data, beta=1.0)
        lam = Rng(2).uniform(-5.0, 5.0, 10)
        a = iterate(problem, lam, 50)
        b = iterate(problem, lam, 50)
        for wa, wb in zip(a.iterates, b.iterates):
            assert np.array_equal(wa, wb)


@pytest.fixture(scope="module")
def br_heavy_ball():
    data = gen_data("br", seed=6, p=12)
    gd = make_br(data, beta=1.0)
    hb = make_br(data, beta=1.0, map_kind="heavy_ball")
    lam = Rng(3).uniform(-5.0, 5.0, 12)
    return gd, hb, lam


class TestHeavyBallMap:
    def test_doubled_state_fixed_point(self, br_heavy_ball):
        gd, hb, lam = br_heavy_ball
        d = gd.dim_w
        assert hb.dim_w == 2 * d
        s_star = hb.exact_fixed_point(lam)
        np.testing.assert_allclose(hb.phi(s_star, lam), s_star, atol=1e-9)

    def test_error_envelope_decreases(self, br_heavy_ball):
        gd, hb, lam = br_heavy_ball
        d = gd.dim_w
        w_star = gd.exact_fixed_point(lam)
        traj = iterate(hb, lam, 140)
        errs = [np.linalg.norm(s[:d] - w_star) for s in traj.iterates]
        for t in range(len(errs) - 20):
            if errs[t] <= 1e-12:
                break
            assert errs[t + 20] < errs[t]

    def test_jacobian_products_are_adjoint(self, br_heavy_ball):
        _, hb, lam = br_heavy_ball
        rng = Rng(4)
        s = rng.normal(hb.dim_w)
        for _ in range(20):
            u = rng.normal(hb.dim_w)
            v = rng.normal(hb.dim_w)
            lhs = float(u @ hb.apply_d1phi(s, lam, v))
            rhs = float(v @ hb.d1phi_tvec(s, lam, u))
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_itd_through_heavy_ball_converges_to_exact(self, br_heavy_ball):
        gd, hb, lam = br_heavy_ball
        exact = exact_hypergrad(gd, lam).grad
        approx = itd(hb, lam, 300).grad
        assert np.linalg.norm(approx - exact) <= 1e-8 * (1 + np.linalg.norm(exact))

    def test_no_euclidean_contraction_declared(self, br_heavy_ball):
        _, hb, _ = br_heavy_ball
        assert hb.contraction_q is None and not hb.symmetric_d1phi


def test_heavy_ball_transient_growth_not_flagged():
    # a stiff quadratic overshoots early on; the guard must only catch blow-up
    rng = Rng(8)
    a = rng.normal(30, 6)
    gram = a.T @ a
    eigs = np.linalg.eigvalsh(gram)
    lower = LowerObjective(
        grad=lambda w, lam: gram @ w - lam,
        hvp=lambda w, lam, v: gram @ v,
        cross_tvec=lambda w, lam, v: -v,
        mu=lambda lam: float(eigs[0]),
        L=lambda lam: float(eigs[-1]),
    )
    outer = OuterObjective(
        value=lambda w, lam: 0.5 * float(w @ w),
        grad1=lambda w, lam: w.copy(),
        grad2=lambda w, lam: np.zeros(6),
    )
    hb = heavy_ball_problem(lower, outer, dim_w=6, dim_lambda=6)
    lam = rng.normal(6)
    traj = iterate(hb, lam, 400)  # must not raise
    w_star = np.linalg.solve(gram, lam)
    assert np.linalg.norm(traj.final[:6] - w_star) < 1e-8
