import math

import numpy as np
import pytest

from flowlab.fields import make_field_set
from flowlab.flow import (CenteringError, FlowError, FlowOverflowError,
                          FunctionalSpec, batch_mgs, center_functional,
                          displacement_functional, evolve, functional_series,
                          make_state, step)
from flowlab.noise import make_path
from flowlab.trig import TrigPoly, quadrature_grid


def const_set(dim, vectors):
    coeffs = [[(tuple([0] * dim), np.asarray(v, float), np.zeros(dim))]
              for v in vectors]
    return make_field_set(dim, len(vectors) - 1, coefficients=coeffs)


ZERO2 = make_field_set(2, 2, coefficients=[[], [], []])


class TestStepping:
    def test_zero_fields_leave_state_fixed(self):
        path = make_path(1, 0, 2, 0.01, (0, 100))
        x0 = np.array([[0.2, 0.7], [0.5, 0.5]])
        st = evolve(ZERO2, x0, path, 0.0, 1.0)
        np.testing.assert_array_equal(st.lift, x0)
        assert st.time == pytest.approx(1.0)

    @pytest.mark.parametrize("scheme", ["heun", "ito_euler"])
    def test_constant_fields_closed_form(self, scheme):
        c = [(0.3, -0.2), (1.0, 0.5), (-0.4, 0.7)]
        F = const_set(2, c)
        dt = 1e-3
        steps = 10_000
        path = make_path(1, 0, 2, dt, (0, steps))
        x0 = np.array([[0.2, 0.7]])
        st = evolve(F, x0, path, 0.0, steps * dt, scheme=scheme)
        theta = path.value(steps)
        expect = (x0[0] + np.array(c[0]) * (steps * dt)
                  + np.array(c[1]) * theta[0] + np.array(c[2]) * theta[1])
        assert np.abs(st.lift[0] - expect).max() <= 1e-12

    def test_ito_equals_plain_euler_when_correction_vanishes(self):
        # X1 = (sin 2 pi x2, 0): DX1 . X1 = 0 everywhere
        F = make_field_set(2, 1, coefficients=[
            [], [((0, 1), (0.0, 0.0), (1.0, 0.0))]])
        dt = 1e-3
        path = make_path(3, 0, 1, dt, (0, 500))
        st = evolve(F, np.array([[0.3, 0.8]]), path, 0.0, 0.5,
                    scheme="ito_euler")
        x = np.array([0.3, 0.8])
        dW = path.increments(0, 500)
        for s in range(500):
            x = x + np.array([math.sin(2 * math.pi * x[1]), 0.0]) * dW[s, 0]
        np.testing.assert_array_equal(st.lift[0], x)

    def test_split_evolution_is_bitwise_identical(self, demo_set):
        path = make_path(4, 0, 3, 1e-3, (0, 2000))
        x0 = np.array([[0.1, 0.9], [0.4, 0.3]])
        full = evolve(demo_set, x0, path, 0.0, 2.0)
        half = evolve(demo_set, x0, path, 0.0, 1.0)
        rest = evolve(demo_set, half, path, 1.0, 2.0)
        np.testing.assert_array_equal(full.lift, rest.lift)

    def test_identical_points_never_separate(self, demo_set):
        path = make_path(4, 1, 3, 1e-3, (0, 5000))
        x0 = np.array([[0.25, 0.75], [0.25, 0.75]])
        st = evolve(demo_set, x0, path, 0.0, 5.0)
        np.testing.assert_array_equal(st.lift[0], st.lift[1])

    def test_lift_minus_torus_is_integer(self, demo_set):
        path = make_path(4, 2, 3, 1e-3, (0, 3000))
        st = evolve(demo_set, np.array([[0.9, 0.1]]), path, 0.0, 3.0)
        wind = st.lift - st.torus
        np.testing.assert_array_equal(wind, np.round(wind))

    def test_backward_rejected(self, demo_set):
        path = make_path(4, 3, 3, 1e-3, (0, 100))
        with pytest.raises(FlowError):
            evolve(demo_set, np.array([[0.1, 0.2]]), path, 0.1, 0.0)

    def test_off_grid_time_rejected(self, demo_set):
        path = make_path(4, 3, 3, 1e-3, (0, 100))
        with pytest.raises(FlowError):
            evolve(demo_set, np.array([[0.1, 0.2]]), path, 0.0, 0.05015)

    def test_overflow_aborts_with_diagnostic(self):
        # tangent frames under violent stretching with renormalization off
        F = make_field_set(2, 2, coefficients=[
            [],
            [((0, 1), (1e6, 0.0), (0.0, 0.0))],
            [((1, 0), (0.0, 1e6), (0.0, 0.0))]])
        path = make_path(4, 4, 2, 1e-3, (0, 2000))
        with pytest.raises(FlowOverflowError) as err:
            evolve(F, np.array([[0.3, 0.8]]), path, 0.0, 2.0, frames=2,
                   qr_every=0)
        assert "non-finite" in str(err.value)

    def test_step_advances_one_grid_unit(self, demo_set):
        path = make_path(4, 5, 3, 1e-3, (0, 10))
        st0 = make_state(np.array([[0.3, 0.3]]), 1e-3, 0.0)
        st1 = step(demo_set, st0, path)
        assert st1.step_index == 1

    def test_strong_self_convergence_quick(self, demo_set):
        # order >= 0.45 with bridge-refined common noise, small version
        from flowlab.experiments import strong_convergence
        res = strong_convergence(demo_set, seed=12, dt0=1e-2, levels=3,
                                 T=1.0, reps=300)
        assert res.order >= 0.45
        assert res.r_squared >= 0.95


class TestTrajectoryAndFrames:
    def test_record_includes_initial_state(self, demo_set):
        path = make_path(5, 0, 3, 1e-3, (0, 100))
        x0 = np.array([[0.2, 0.2]])
        st, traj = evolve(demo_set, x0, path, 0.0, 0.1, record=True)
        assert traj.lift.shape == (101, 1, 2)
        np.testing.assert_array_equal(traj.lift[0], x0)
        np.testing.assert_array_equal(traj.lift[-1], st.lift)

    def test_frames_identity_for_zero_fields(self):
        path = make_path(5, 1, 2, 0.01, (0, 50))
        st = evolve(ZERO2, np.array([[0.4, 0.6]]), path, 0.0, 0.5, frames=2)
        np.testing.assert_array_equal(st.frames[0], np.eye(2))
        np.testing.assert_array_equal(st.log_r, np.zeros((1, 2)))

    def test_negative_det_frames_rejected(self, demo_set):
        flipped = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(FlowError):
            make_state(np.array([[0.1, 0.1]]), 1e-3, frames=flipped)

    def test_batch_mgs_orthonormalizes(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(4, 3, 3))
        frames[:, 0, 0] += 3  # keep well-conditioned
        logs = batch_mgs(frames)
        for i in range(4):
            np.testing.assert_allclose(frames[i].T @ frames[i], np.eye(3),
                                       atol=1e-12)
        assert np.isfinite(logs).all()

    def test_qr_sum_matches_logdet_identity(self, demo_set):
        path = make_path(5, 2, 3, 1e-3, (0, 2000))
        st = evolve(demo_set, np.array([[0.3, 0.4]]), path, 0.0, 2.0,
                    frames=2, qr_every=10)
        assert abs(st.log_r[0].sum() - st.log_det[0]) <= 1e-8


class TestFunctionals:
    def make_pair_spec(self):
        # scalar arity-2 functional on (T^2)^2
        m1 = [1, 0, 0, 0]
        m2 = [0, 0, 1, 0]
        alphas = tuple(TrigPoly([m1], [[0.8 / (k + 1)]], [[0.1]])
                       for k in range(3))
        drift = TrigPoly([m2], [[0.4]], [[-0.2]])
        return FunctionalSpec(arity=2, alphas=alphas, drift=drift)

    def test_linearity_exact(self, demo_set):
        path = make_path(6, 0, 3, 1e-3, (0, 1000))
        z0 = np.array([[0.2, 0.3], [0.6, 0.8]])
        s1 = self.make_pair_spec()
        s2 = FunctionalSpec(arity=2, alphas=tuple(a.scale(-2.0) for a in s1.alphas),
                            drift=s1.drift.scale(-2.0))
        s3 = FunctionalSpec(arity=2,
                            alphas=tuple(a + b for a, b in zip(s1.alphas, s2.alphas)),
                            drift=s1.drift + s2.drift)
        st = evolve(demo_set, z0, path, 0.0, 1.0, functionals=[s1, s2, s3])
        a1, a2, a3 = st.functionals
        np.testing.assert_allclose(a3, a1 + a2, atol=1e-12)

    def test_functional_series_matches_accumulator(self, demo_set):
        path = make_path(6, 1, 3, 1e-3, (0, 500))
        z0 = np.array([[0.2, 0.3], [0.6, 0.8]])
        spec = self.make_pair_spec()
        st, traj = evolve(demo_set, z0, path, 0.0, 0.5, functionals=[spec],
                          record=True)
        series = functional_series(demo_set, spec, traj, path.increments(0, 500))
        np.testing.assert_allclose(series[-1], st.functionals[0], atol=1e-10)

    def test_displacement_functional_equals_lift_displacement(self, demo_set):
        # alpha_k = X_k, a = X_0 integrates to the lift displacement
        path = make_path(6, 2, 3, 1e-3, (0, 2000))
        spec = displacement_functional(demo_set)
        x0 = np.array([[0.35, 0.55]])
        st = evolve(demo_set, x0, path, 0.0, 2.0, scheme="ito_euler",
                    functionals=[spec])
        disp = st.lift[0] - x0[0]
        np.testing.assert_allclose(st.functionals[0], disp, atol=1e-9)

    def test_arity_mismatch_rejected(self, demo_set):
        path = make_path(6, 3, 3, 1e-3, (0, 10))
        spec = self.make_pair_spec()
        with pytest.raises(FlowError):
            evolve(demo_set, np.array([[0.1, 0.1]]), path, 0.0, 0.01,
                   functionals=[spec])


class TestCentering:
    def test_constant_drift_centered_to_zero(self, demo_set):
        spec = FunctionalSpec(arity=2, alphas=tuple(
            TrigPoly.zero(4, 1) for _ in range(3)),
            drift=TrigPoly.constant(4, 5.0))
        centered = center_functional(demo_set, spec)
        Z = np.random.default_rng(0).random((50, 4))
        np.testing.assert_allclose(centered.drift.eval(Z), 0.0, atol=1e-12)
        assert centered.centered

    def test_odd_mode_alpha_unchanged(self, demo_set):
        # alpha_1 = sin 2 pi x1 has exact zero mean: unchanged by centering
        alphas = [TrigPoly([[1, 0]], [[0.0]], [[1.0]])]
        alphas += [TrigPoly.zero(2, 1) for _ in range(2)]
        spec = FunctionalSpec(arity=1, alphas=tuple(alphas),
                              drift=TrigPoly.zero(2, 1))
        centered = center_functional(demo_set, spec)
        x = np.random.default_rng(1).random((40, 2))
        np.testing.assert_allclose(centered.alphas[0].eval(x),
                                   alphas[0].eval(x), atol=1e-15)

    def test_centering_constant_matches_dense_quadrature(self, demo_set):
        # cos mode alpha against a 256^2 tensor-grid oracle
        alphas = [TrigPoly([[1, 0]], [[1.0]], [[0.0]]),
                  TrigPoly([[0, 1]], [[0.5]], [[0.2]]),
                  TrigPoly([[1, 1]], [[-0.3]], [[0.4]])]
        drift = TrigPoly([[1, 0]], [[0.7]], [[0.1]])
        spec = FunctionalSpec(arity=1, alphas=tuple(alphas), drift=drift)
        centered = center_functional(demo_set, spec)
        c = centered.centering_constants["drift"]
        # oracle: a + 1/2 sum L_Xk alpha_k averaged on a dense grid
        grid = quadrature_grid(2, 256)
        vals = drift.eval(grid)[:, 0]
        for k in range(1, 4):
            Xk = demo_set.eval(k, grid)
            grad = alphas[k - 1].jacobian(grid)[:, 0, :]
            vals = vals + 0.5 * np.einsum("bj,bj->b", grad, Xk)
        np.testing.assert_allclose(c, vals.mean(), atol=1e-12)
        # after centering the mean drift integral vanishes
        cvals = centered.drift.eval(grid)[:, 0]
        for k in range(1, 4):
            Xk = demo_set.eval(k, grid)
            grad = centered.alphas[k - 1].jacobian(grid)[:, 0, :]
            cvals = cvals + 0.5 * np.einsum("bj,bj->b", grad, Xk)
        assert abs(cvals.mean()) <= 1e-12

    def test_mc_route_gates_on_tolerance(self, demo_set):
        spec = FunctionalSpec(arity=1,
                              alphas=tuple(TrigPoly([[1, 0]], [[1.0]], [[0.0]])
                                           for _ in range(3)),
                              drift=TrigPoly([[1, 0]], [[0.7]], [[0.1]]))
        with pytest.raises(CenteringError):
            center_functional(demo_set, spec, mc_samples=50, tol=1e-6)
        centered = center_functional(demo_set, spec, mc_samples=20000, tol=0.05)
        assert centered.centered

    def test_pure_noise_constants_forced_out(self, demo_set):
        # alpha_k constant: centering must remove the constants entirely
        spec = FunctionalSpec(arity=1,
                              alphas=tuple(TrigPoly.constant(2, 0.7)
                                           for _ in range(3)),
                              drift=TrigPoly.zero(2, 1))
        centered = center_functional(demo_set, spec)
        x = np.random.default_rng(2).random((30, 2))
        for a in centered.alphas:
            np.testing.assert_allclose(a.eval(x), 0.0, atol=1e-15)
