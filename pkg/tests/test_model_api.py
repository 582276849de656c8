import numpy as np
import pytest

from varest import (
    DimensionTooLarge,
    LinearModel,
    Model,
    NonFiniteState,
    fd_fallback_wrap,
    fd_jacvec,
    heat1d_build,
    lorenz96_build,
    propagate,
)
from varest.model import (
    duality_gap,
    richardson_slope,
    soa_consistency_residual,
    tlm_consistency_residual,
)


class ScalarSquare(Model):
    """x -> x^2, step-only (derivatives come from the FD wrapper)."""

    dim = 1
    num_steps = 2
    time_step = 1.0

    def step(self, k, x):
        return x * x


class Exploding(Model):
    dim = 2
    num_steps = 5
    time_step = 1.0

    def step(self, k, x):
        if k >= 2:
            return x * np.inf
        return x


class TestPropagate:
    def test_identity_model(self):
        model = LinearModel(np.eye(2), num_steps=3)
        traj = propagate(model, [1.0, 2.0])
        assert traj.states.shape == (4, 2)
        for state in traj.states:
            np.testing.assert_array_equal(state, [1.0, 2.0])
        assert traj.adjoints is None

    def test_scalar_doubling(self):
        model = LinearModel([[2.0]], num_steps=3)
        traj = propagate(model, [1.0])
        np.testing.assert_allclose(traj.states[:, 0], [1.0, 2.0, 4.0, 8.0])

    def test_heat_max_norm_nonincreasing(self):
        model = heat1d_build(n=24, dt=1e-3, num_steps=40)
        u0 = np.sin(np.pi * model.grid) + 0.5 * np.cos(3 * np.pi * model.grid)
        traj = propagate(model, u0)
        maxima = np.abs(traj.states).max(axis=1)
        assert np.all(np.diff(maxima) <= 1e-14)

    def test_blowup_reports_step(self):
        with pytest.raises(NonFiniteState) as err:
            propagate(Exploding(), [1.0, 1.0])
        assert err.value.step == 2


class TestFdFallback:
    def test_scalar_square_tlm(self):
        wrapped = fd_fallback_wrap(ScalarSquare())
        out = wrapped.tlm_apply(0, np.array([3.0]), np.array([1.0]))
        np.testing.assert_allclose(out, [6.0], atol=1e-6)

    def test_wrapped_heat_matches_analytic_tlm(self, rng):
        model = heat1d_build(n=16, dt=1e-3, num_steps=5)
        wrapped = fd_fallback_wrap(model)
        x = rng.normal(size=16)
        d = rng.normal(size=16)
        exact = model.tlm_apply(0, x, d)
        approx = wrapped.tlm_apply(0, x, d)
        assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 1e-6

    def test_wrapped_duality(self, rng):
        wrapped = fd_fallback_wrap(lorenz96_build(n=6, dt=0.05, num_steps=2))
        for _ in range(10):
            x = 8.0 + rng.normal(size=6)
            gap = duality_gap(wrapped, 0, x, rng.normal(size=6), rng.normal(size=6))
            assert gap < 1e-8

    def test_dimension_refusal(self):
        class Big(Model):
            dim = 65
            num_steps = 1
            time_step = 1.0

            def step(self, k, x):
                return x

        wrapped = fd_fallback_wrap(Big())
        with pytest.raises(DimensionTooLarge):
            wrapped.adj_apply(0, np.zeros(65), np.zeros(65))

    def test_wrapped_soa_matches_analytic(self, rng):
        model = lorenz96_build(n=6, dt=0.05, num_steps=2)
        wrapped = fd_fallback_wrap(model)
        x = 8.0 + rng.normal(size=6)
        lam = rng.normal(size=6)
        mu = rng.normal(size=6)
        exact = model.soa_apply(0, x, lam, mu)
        approx = wrapped.soa_apply(0, x, lam, mu)
        assert np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), 1e-12) < 1e-5


class TestDerivativeInvariants:
    @pytest.mark.parametrize("build", [
        lambda: heat1d_build(n=12, dt=1e-3, num_steps=4),
        lambda: lorenz96_build(n=8, dt=0.05, num_steps=4),
    ])
    def test_duality_50_tuples(self, build, rng):
        model = build()
        for _ in range(50):
            k = int(rng.integers(0, model.num_steps))
            x = rng.normal(size=model.dim) + 4.0
            gap = duality_gap(model, k, x, rng.normal(size=model.dim),
                              rng.normal(size=model.dim))
            assert gap < 1e-12

    def test_tlm_consistency_order(self, rng):
        model = lorenz96_build(n=8, dt=0.05, num_steps=2)
        x = 8.0 + rng.normal(size=8)
        d = rng.normal(size=8)
        slope = richardson_slope(
            lambda e: tlm_consistency_residual(model, 0, x, d, e))
        assert 0.9 <= slope <= 1.1

    def test_soa_consistency_order(self, rng):
        model = lorenz96_build(n=8, dt=0.05, num_steps=2)
        x = 8.0 + rng.normal(size=8)
        lam = rng.normal(size=8)
        mu = rng.normal(size=8)
        slope = richardson_slope(
            lambda e: soa_consistency_residual(model, 0, x, lam, mu, e))
        assert 0.9 <= slope <= 1.1

    def test_tlm_matches_fd_jacvec(self, rng):
        model = lorenz96_build(n=8, dt=0.05, num_steps=2)
        x = 8.0 + rng.normal(size=8)
        d = rng.normal(size=8)
        fd = fd_jacvec(lambda z: model.step(0, z), x, d)
        assert np.linalg.norm(model.tlm_apply(0, x, d) - fd) / np.linalg.norm(fd) < 1e-7

    def test_param_jacobian_hook_is_zero(self, rng):
        model = lorenz96_build(n=6, dt=0.05, num_steps=2)
        out = model.param_jac_apply(0, rng.normal(size=6), rng.normal(size=6))
        np.testing.assert_array_equal(out, np.zeros(6))
