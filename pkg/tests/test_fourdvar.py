import numpy as np
import pytest

from varest import (
    Background,
    CovMatrix,
    LinearModel,
    ObservationSet,
    assimilate,
    cost,
    fd_gradient,
    fd_jacvec,
    gradient,
    heat1d_build,
    hess_vec,
    make_context,
    propagate,
)
from varest.fourdvar import IndexObsOperator, hessian_operator, kkt_residual
from conftest import (
    dense_reduced_hessian,
    naive_cost,
    normal_equations_analysis,
    random_linear_problem,
    small_heat_problem,
    small_l96_problem,
)


def scalar_problem():
    """x_{k+1} = 2 x_k, xb = 0, B = 1, identity obs with R = 1,
    y0 = 1, y1 = 2.  At x0 = 1 the data terms vanish: cost = 1/2,
    gradient = background term = 1."""
    model = LinearModel([[2.0]], num_steps=1)
    obs = ObservationSet.identity(1, {0: [1.0], 1: [2.0]},
                                  CovMatrix.scaled_identity(1, 1.0))
    bg = Background(x_b=[0.0], b0=CovMatrix.scaled_identity(1, 1.0))
    return model, obs, bg


class TestCost:
    def test_perfect_fit_is_zero(self, rng):
        model, truth, obs, bg = small_heat_problem(rng, sample_noise=False)
        bg_perfect = Background(x_b=truth, b0=bg.b0)
        assert cost(truth, model, obs, bg_perfect) == pytest.approx(0.0, abs=1e-20)

    def test_scalar_hand_value(self):
        model, obs, bg = scalar_problem()
        assert cost([1.0], model, obs, bg) == pytest.approx(0.5, abs=1e-15)

    def test_matches_naive_reimplementation(self, rng):
        model, _, obs, bg = random_linear_problem(rng)
        for _ in range(5):
            x0 = rng.normal(size=model.dim)
            ours = cost(x0, model, obs, bg)
            theirs = naive_cost(x0, model, obs, bg)
            assert abs(ours - theirs) <= 1e-12 * max(1.0, abs(theirs))


class TestGradient:
    def test_zero_innovation_zero_gradient(self, rng):
        model, truth, obs, bg = small_heat_problem(rng, sample_noise=False)
        bg_perfect = Background(x_b=truth, b0=bg.b0)
        g, _ = gradient(truth, model, obs, bg_perfect)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_scalar_hand_value(self):
        model, obs, bg = scalar_problem()
        g, traj = gradient([1.0], model, obs, bg)
        np.testing.assert_allclose(g, [1.0], atol=1e-14)
        assert traj.adjoints is not None

    def test_matches_fd_on_heat(self, rng):
        model = heat1d_build(n=20, dt=1e-3, num_steps=10)
        _, truth, obs, bg = small_heat_problem(rng, n=20, steps=10, obs_every=2)
        model = heat1d_build(n=20, dt=1e-3, num_steps=10)
        for _ in range(3):
            x0 = truth + 0.1 * rng.normal(size=20)
            g, _ = gradient(x0, model, obs, bg)
            gfd = fd_gradient(lambda z: cost(z, model, obs, bg), x0)
            assert np.linalg.norm(g - gfd) / np.linalg.norm(gfd) < 1e-6

    def test_matches_fd_on_l96_with_gaps(self, rng):
        model, truth, obs, bg = small_l96_problem(rng, n=8, steps=12, obs_every=5)
        x0 = truth + 0.05 * rng.normal(size=8)
        g, _ = gradient(x0, model, obs, bg)
        gfd = fd_gradient(lambda z: cost(z, model, obs, bg), x0)
        assert np.linalg.norm(g - gfd) / np.linalg.norm(gfd) < 1e-6

    def test_adjoint_recursion_recheckable(self, rng):
        """Stored costates satisfy the backward recursion at the states."""
        model, truth, obs, bg = small_l96_problem(rng, n=6, steps=6, obs_every=2)
        _, traj = gradient(truth, model, obs, bg)
        lam = traj.adjoints
        for k in range(model.num_steps - 1, -1, -1):
            expect = model.adj_apply(k, traj.states[k], lam[k + 1])
            if obs.has(k):
                innov = obs.op(k).apply(traj.states[k]) - obs.y(k)
                expect = expect + obs.op(k).adj_apply(traj.states[k],
                                                      obs.r(k).solve(innov))
            np.testing.assert_allclose(lam[k], expect, atol=1e-12)


class TestHessVec:
    def test_dense_assembly_oracle_linear_model(self, rng):
        model, _, obs, bg = random_linear_problem(rng, n=8, steps=5)
        ctx = make_context(model, obs, bg, rng.normal(size=8))
        dense = dense_reduced_hessian(model.propagator, obs, bg)
        assembled = hessian_operator(ctx).as_matrix()
        assert np.abs(assembled - dense).max() / np.abs(dense).max() < 1e-12

    def test_symmetry_on_heat_and_l96(self, rng):
        for problem in (small_heat_problem(rng, n=12, steps=10),
                        small_l96_problem(rng, n=8, steps=8)):
            model, truth, obs, bg = problem
            ctx = make_context(model, obs, bg, truth)
            for _ in range(20):
                u = rng.normal(size=model.dim)
                v = rng.normal(size=model.dim)
                lhs = v @ hess_vec(u, ctx)
                rhs = u @ hess_vec(v, ctx)
                assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))

    def test_zero_vector(self, rng):
        model, truth, obs, bg = small_heat_problem(rng, n=10, steps=5)
        ctx = make_context(model, obs, bg, truth)
        np.testing.assert_array_equal(hess_vec(np.zeros(10), ctx), np.zeros(10))

    def test_matches_fd_of_gradient_at_analysis(self, rng):
        model, truth, obs, bg = small_l96_problem(rng, n=8, steps=8)
        result = assimilate(model, obs, bg, grad_tol=1e-10)
        u = rng.normal(size=8)
        hu = hess_vec(u, result.context)
        hfd = fd_jacvec(lambda z: gradient(z, model, obs, bg)[0],
                        result.analysis, u, step=1e-5)
        assert np.linalg.norm(hu - hfd) / np.linalg.norm(hfd) < 1e-4

    def test_gauss_newton_drops_curvature_only(self, rng):
        model, truth, obs, bg = small_l96_problem(rng, n=8, steps=8)
        ctx = make_context(model, obs, bg, truth + 0.1 * rng.normal(size=8))
        u = rng.normal(size=8)
        full = hess_vec(u, ctx)
        gn = hess_vec(u, ctx, gauss_newton=True)
        assert np.linalg.norm(full - gn) > 0        # curvature term present
        # Gauss-Newton operator stays symmetric.
        v = rng.normal(size=8)
        lhs = v @ hess_vec(u, ctx, gauss_newton=True)
        rhs = u @ hess_vec(v, ctx, gauss_newton=True)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))

    def test_gauss_newton_equals_full_for_linear_model(self, rng):
        model, _, obs, bg = random_linear_problem(rng)
        ctx = make_context(model, obs, bg, rng.normal(size=model.dim))
        u = rng.normal(size=model.dim)
        np.testing.assert_allclose(hess_vec(u, ctx),
                                   hess_vec(u, ctx, gauss_newton=True), rtol=1e-14)


class TestAssimilate:
    def test_minimizer_dominance(self, rng):
        model, truth, obs, bg = small_heat_problem(rng, sample_noise=False)
        result = assimilate(model, obs, bg)
        j_a = cost(result.analysis, model, obs, bg)
        assert j_a <= cost(bg.x_b, model, obs, bg) + 1e-12
        assert j_a <= cost(truth, model, obs, bg) + 1e-12

    def test_matches_normal_equations_linear(self, rng):
        model, _, obs, bg = random_linear_problem(rng, n=16, steps=4)
        result = assimilate(model, obs, bg, grad_tol=1e-12)
        expected = normal_equations_analysis(model.propagator, obs, bg)
        err = np.linalg.norm(result.analysis - expected) / np.linalg.norm(expected)
        assert err < 1e-8

    def test_twin_experiment_improves_on_background(self, rng):
        model, truth, obs, bg = small_heat_problem(rng, n=30, steps=60, obs_every=10)
        result = assimilate(model, obs, bg)
        rmse_b = np.sqrt(np.mean((bg.x_b - truth) ** 2))
        rmse_a = np.sqrt(np.mean((result.analysis - truth) ** 2))
        assert rmse_a < rmse_b

    def test_kkt_residual_bound(self, rng):
        model, truth, obs, bg = small_l96_problem(rng, n=8, steps=8)
        result = assimilate(model, obs, bg)
        assert kkt_residual(result.context) <= 10 * result.grad_tol

    def test_histories_and_inverse_hessian(self, rng):
        model, _, obs, bg = random_linear_problem(rng)
        result = assimilate(model, obs, bg, grad_tol=1e-11)
        assert result.converged
        assert result.cost_history[-1] <= result.cost_history[0]
        assert result.grad_norm_history[-1] <= 1e-11
        # Inverse-Hessian approximation inverts the true Hessian decently.
        dense = dense_reduced_hessian(model.propagator, obs, bg)
        v = np.ones(model.dim)
        out = result.inv_hessian.apply(dense @ v)
        assert np.linalg.norm(out - v) / np.linalg.norm(v) < 1e-5


class TestObservationOperators:
    def test_index_operator_duality(self, rng):
        op = IndexObsOperator([1, 4, 7], dim=9)
        for _ in range(10):
            dx = rng.normal(size=9)
            w = rng.normal(size=3)
            lhs = op.jac_apply(None, dx) @ w
            rhs = dx @ op.adj_apply(None, w)
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-30)

    def test_partial_observation_gradient_matches_fd(self, rng):
        model, truth, _, bg = small_l96_problem(rng, n=8, steps=6)
        traj = propagate(model, truth)
        idx = [0, 3, 5]
        values = {k: traj.states[k][idx] for k in (0, 3, 6)}
        obs = ObservationSet.components(8, idx, values,
                                        CovMatrix.scaled_identity(3, 0.1))
        x0 = truth + 0.05 * rng.normal(size=8)
        g, _ = gradient(x0, model, obs, bg)
        gfd = fd_gradient(lambda z: cost(z, model, obs, bg), x0)
        assert np.linalg.norm(g - gfd) / np.linalg.norm(gfd) < 1e-6

    def test_shifted_observations(self, rng):
        model, truth, obs, bg = small_heat_problem(rng, n=10, steps=5, obs_every=5)
        delta = {k: np.ones(10) for k in obs.times}
        shifted = obs.shifted(delta)
        for k in obs.times:
            np.testing.assert_allclose(shifted.y(k), obs.y(k) + 1.0)
        # Original untouched.
        assert not np.allclose(shifted.y(0), obs.y(0))
