import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab.fields import make_field_set
from flowlab.measures import (MeasureError, ParticleMeasure, ball_measure,
                              curve_measure, displacement_sample, from_points,
                              grid_measure, observable_average, p_energy,
                              pushforward)
from flowlab.noise import make_path
from flowlab.trig import TrigPoly

ZERO2 = make_field_set(2, 2, coefficients=[[], [], []])


def const_set(dim, vectors):
    coeffs = [[(tuple([0] * dim), np.asarray(v, float), np.zeros(dim))]
              for v in vectors]
    return make_field_set(dim, len(vectors) - 1, coefficients=coeffs)


def brute_force_energy(torus, weights, p):
    """Independent O(n^2) double loop; torus distance via explicit minimum
    over the 3^N lattice shifts."""
    n, N = torus.shape
    shifts = np.array(np.meshgrid(*([[-1, 0, 1]] * N), indexing="ij")
                      ).reshape(N, -1).T
    total = 0.0
    for i in range(n):
        diff = torus - torus[i]                       # (n, N)
        cand = diff[:, None, :] + shifts[None, :, :]  # (n, 27, N)
        d = np.sqrt((cand ** 2).sum(axis=2)).min(axis=1)
        d[i] = np.inf
        total += float(np.sum(weights[i] * weights / d ** p))
    return total


class TestPEnergy:
    def test_two_atoms_hand_value(self):
        nu = from_points([[0.0, 0.0], [0.5, 0.0]], weights=[0.5, 0.5])
        assert p_energy(nu, 1.0) == pytest.approx(1.0, abs=1e-14)

    def test_coincident_atoms_infinite(self):
        nu = from_points([[0.1, 0.2], [0.1, 0.2]])
        assert p_energy(nu, 1.0) == math.inf

    def test_single_particle_rejected(self):
        nu = from_points([[0.1, 0.2]])
        with pytest.raises(MeasureError):
            p_energy(nu, 0.5)

    def test_against_brute_force_double_loop(self):
        nu = grid_measure(2, 32)  # 1024 particles
        got = p_energy(nu, 0.5)
        want = brute_force_energy(nu.torus, nu.weights, 0.5)
        assert abs(got - want) / want <= 1e-12

    def test_blocked_evaluation_matches_direct(self):
        from flowlab import measures
        nu = from_points(np.random.default_rng(0).random((300, 2)))
        direct = p_energy(nu, 0.7)
        old = measures.PAIR_BLOCK
        try:
            measures.PAIR_BLOCK = 64
            blocked = p_energy(nu, 0.7)
        finally:
            measures.PAIR_BLOCK = old
        assert abs(direct - blocked) <= 1e-12 * direct

    @given(st.floats(0.25, 4.0))
    @settings(max_examples=20, deadline=None)
    def test_mass_square_scaling(self, c):
        nu = from_points([[0.1, 0.1], [0.4, 0.7], [0.8, 0.2]])
        assert p_energy(nu.scaled(c), 0.5) == pytest.approx(
            c * c * p_energy(nu, 0.5), rel=1e-12)

    def test_symmetry_under_reordering(self):
        pts = np.random.default_rng(1).random((20, 2))
        nu1 = from_points(pts)
        perm = np.random.default_rng(2).permutation(20)
        nu2 = from_points(pts[perm])
        assert p_energy(nu1, 1.5) == pytest.approx(p_energy(nu2, 1.5), rel=1e-12)


class TestPushforward:
    def test_zero_fields_identity(self):
        nu = ball_measure([0.5, 0.5], 0.2, 64, seed=3)
        path = make_path(1, 0, 2, 0.01, (0, 100))
        nu_t = pushforward(ZERO2, nu, path, 1.0)
        np.testing.assert_array_equal(nu_t.torus, nu.torus)
        np.testing.assert_array_equal(nu_t.weights, nu.weights)

    def test_t_zero_identity(self):
        nu = ball_measure([0.5, 0.5], 0.2, 16, seed=3)
        path = make_path(1, 0, 2, 0.01, (0, 10))
        nu_t = pushforward(ZERO2, nu, path, 0.0)
        np.testing.assert_array_equal(nu_t.lift, nu.lift)

    def test_constant_fields_translate_and_preserve_energy(self):
        c = [(0.2, -0.1), (0.6, 0.3), (-0.5, 0.8)]
        F = const_set(2, c)
        nu = ball_measure([0.4, 0.6], 0.15, 128, seed=4)
        path = make_path(2, 0, 2, 1e-3, (0, 1000))
        t = 1.0
        nu_t = pushforward(F, nu, path, t)
        theta = path.value(1000)
        shift = (np.array(c[0]) * t + np.array(c[1]) * theta[0]
                 + np.array(c[2]) * theta[1])
        np.testing.assert_allclose(nu_t.lift, nu.lift + shift, atol=1e-12)
        assert p_energy(nu_t, 0.5) == pytest.approx(p_energy(nu, 0.5),
                                                    rel=1e-10)

    def test_mass_preserved_exactly(self, demo_set):
        nu = curve_measure(2, 100)
        path = make_path(2, 1, 3, 1e-3, (0, 500))
        nu_t = pushforward(demo_set, nu, path, 0.5)
        np.testing.assert_array_equal(nu_t.weights, nu.weights)


class TestObservableAverage:
    def test_zero_observable(self):
        nu = grid_measure(2, 8)
        b = TrigPoly.zero(2, 1)
        assert observable_average(nu, b) == 0.0

    def test_grid_discrete_orthogonality(self):
        # full 64^2 grid kills every pure mode below the Nyquist band
        nu = grid_measure(2, 64)
        for mode in ([1, 0], [0, 1], [3, 2], [11, -7]):
            b = TrigPoly([mode], [[1.0]], [[0.5]])
            assert abs(observable_average(nu, b)) <= 1e-12
            # oracle: direct sum over the grid
            direct = float(np.dot(nu.weights, b.eval(nu.torus)[:, 0]))
            assert abs(direct) <= 1e-12

    def test_single_atom(self):
        nu = from_points([[0.3, 0.7]])
        b = TrigPoly([[1, 0]], [[1.0]], [[0.0]])
        assert observable_average(nu, b) == pytest.approx(
            math.cos(2 * math.pi * 0.3), abs=1e-14)

    def test_nonzero_mean_rejected(self):
        nu = grid_measure(2, 4)
        b = TrigPoly([[0, 0]], [[1.0]], [[0.0]])
        with pytest.raises(MeasureError):
            observable_average(nu, b)


class TestDisplacementSample:
    def test_zero_fields_zero_samples(self):
        nu = ball_measure([0.5, 0.5], 0.2, 32, seed=5)
        path = make_path(3, 0, 2, 0.01, (0, 100))
        nu_t = pushforward(ZERO2, nu, path, 1.0)
        samples, w = displacement_sample(nu_t, np.zeros(2), 1.0)
        np.testing.assert_array_equal(samples, np.zeros((32, 2)))
        np.testing.assert_array_equal(w, nu.weights)

    def test_constant_fields_point_mass(self):
        c = [(0.2, -0.1), (0.6, 0.3), (-0.5, 0.8)]
        F = const_set(2, c)
        nu = ball_measure([0.4, 0.6], 0.15, 64, seed=6)
        path = make_path(3, 1, 2, 1e-3, (0, 4000))
        t = 4.0
        nu_t = pushforward(F, nu, path, t)
        samples, _ = displacement_sample(nu_t, np.zeros(2), t)
        spread = samples.max(axis=0) - samples.min(axis=0)
        assert spread.max() <= 1e-10
        theta = path.value(4000)
        expect = (np.array(c[0]) * t + np.array(c[1]) * theta[0]
                  + np.array(c[2]) * theta[1]) / math.sqrt(t)
        np.testing.assert_allclose(samples[0], expect, atol=1e-10)

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(7)
        torus = rng.random((10, 2))
        lift = torus + rng.integers(-3, 4, size=(10, 2))
        nu = ParticleMeasure(torus=torus, lift=lift,
                             weights=np.full(10, 0.1), origin=torus)
        s1, _ = displacement_sample(nu, np.zeros(2), 2.0)
        nu4 = ParticleMeasure(torus=torus, lift=2 * lift - torus,
                              weights=np.full(10, 0.1),
                              origin=torus)
        # doubling displacements and quadrupling t leaves samples fixed
        s2, _ = displacement_sample(nu4, np.zeros(2), 8.0)
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_t_positive_required(self):
        nu = from_points([[0.1, 0.1]])
        with pytest.raises(MeasureError):
            displacement_sample(nu, np.zeros(2), 0.0)


class TestSerialization:
    def test_csv_roundtrip(self, tmp_path):
        nu = ball_measure([0.3, 0.6], 0.1, 17, seed=8)
        f = tmp_path / "cloud.csv"
        with open(f, "w") as fh:
            nu.to_csv(fh, header_lines=["demo cloud"])
        with open(f) as fh:
            back = ParticleMeasure.from_csv(fh)
        np.testing.assert_array_equal(back.torus, nu.torus)
        np.testing.assert_array_equal(back.weights, nu.weights)

    def test_probability_flag(self):
        nu = from_points([[0.1, 0.2], [0.6, 0.9]])
        assert nu.is_probability()
        assert not nu.scaled(2.0).is_probability()

    def test_negative_weights_rejected(self):
        with pytest.raises(MeasureError):
            from_points([[0.1, 0.2]], weights=[-1.0])
