import math

import numpy as np
import pytest

from flowlab.analysis import (AnalysisError, CltReport, VectorCltReport,
                              estimate_DA_from_samples, exp_moment,
                              fit_exponential_decay, lyapunov_spectrum,
                              lyapunov_top, normality_report,
                              occupation_fraction, stopping_times, tail_fit)
from flowlab.fields import make_field_set
from flowlab.noise import make_path


def const_set(dim, vectors):
    coeffs = [[(tuple([0] * dim), np.asarray(v, float), np.zeros(dim))]
              for v in vectors]
    return make_field_set(dim, len(vectors) - 1, coefficients=coeffs)


def piecewise_distance(times, knots, values):
    """Linear interpolation through (knots, values) sampled at times."""
    return np.interp(times, knots, values)


class TestDecayFits:
    def test_exact_exponential_recovered(self):
        t = np.linspace(0, 10, 40)
        y = 3.0 * np.exp(-0.7 * t)
        fit = fit_exponential_decay(t, y)
        assert fit.rate == pytest.approx(0.7, abs=1e-12)
        assert fit.amplitude == pytest.approx(3.0, rel=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_time_rescaling_covariance(self):
        rng = np.random.default_rng(0)
        samples = rng.exponential(2.0, size=5000)
        f1 = tail_fit(samples)
        f2 = tail_fit(3.0 * samples)
        assert f2.rate == pytest.approx(f1.rate / 3.0, rel=1e-9)

    def test_insufficient_points_rejected(self):
        with pytest.raises(AnalysisError):
            fit_exponential_decay([1.0, 2.0], [1.0, 0.5])

    def test_nonpositive_ordinates_dropped(self):
        t = np.arange(6.0)
        y = np.array([1.0, 0.5, -0.1, 0.25, 0.125, 0.0625])
        fit = fit_exponential_decay(t, y)
        assert fit.n_points == 5


class TestTailFit:
    def test_synthetic_exponential_rate(self):
        rng = np.random.default_rng(42)
        samples = rng.exponential(2.0, size=10 ** 5)  # rate 0.5
        fit = tail_fit(samples)
        assert 0.45 <= fit.rate <= 0.55
        assert fit.r_squared > 0.99

    def test_constant_samples_rejected(self):
        with pytest.raises(AnalysisError):
            tail_fit(np.full(500, 2.0))

    def test_min_samples(self):
        with pytest.raises(AnalysisError):
            tail_fit(np.arange(100.0))


class TestExpMoment:
    def test_alpha_zero_is_exactly_one(self):
        est, ci = exp_moment(np.array([1.0, 5.0, 9.0]), 0.0)
        assert est == 1.0 and ci == (1.0, 1.0)

    def test_hand_value(self):
        est, _ = exp_moment(np.array([1.0, 3.0]), math.log(2.0),
                            tail_rate=10.0)
        assert est == pytest.approx(5.0, rel=1e-12)

    def test_constant_tau_one(self):
        est, _ = exp_moment(np.ones(50), 0.0)
        assert est == 1.0

    def test_alpha_above_tail_rate_rejected(self):
        rng = np.random.default_rng(1)
        samples = rng.exponential(1.0, size=2000)
        with pytest.raises(AnalysisError):
            exp_moment(samples, 5.0)


class TestNormality:
    def test_two_atom_sample_moments(self):
        sample = np.array([-1.0, 1.0] * 100)
        rpt = normality_report(sample)
        assert rpt.skewness == pytest.approx(0.0, abs=1e-12)
        assert rpt.excess_kurtosis == pytest.approx(-2.0, abs=1e-12)
        assert not rpt.passed_ks

    def test_reference_gaussian_passes(self):
        rng = np.random.default_rng(2)
        sample = rng.normal(0.3, 1.7, size=10 ** 5)
        rpt = normality_report(sample)
        assert rpt.ks_stat < 1.63 / math.sqrt(len(sample))
        assert rpt.passed

    def test_degenerate_rejected(self):
        with pytest.raises(AnalysisError):
            normality_report(np.full(200, 3.0))

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=500)
        w = rng.random(500)
        r1 = normality_report(x, w)
        r2 = normality_report(x, 7.5 * w)
        for f in ("mean", "variance", "skewness", "excess_kurtosis",
                  "ks_stat", "n_effective"):
            assert getattr(r1, f) == pytest.approx(getattr(r2, f), rel=1e-12)

    def test_vector_report_covariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5000, 2))
        rpt = normality_report(x)
        assert isinstance(rpt, VectorCltReport)
        assert len(rpt.per_coordinate) == 2
        np.testing.assert_allclose(rpt.covariance, np.eye(2), atol=0.1)

    def test_effective_size_gate(self):
        with pytest.raises(AnalysisError):
            normality_report(np.random.default_rng(5).normal(size=50))


class TestStoppingTimes:
    def test_flat_distance_above_r_gives_empty_truncated_record(self):
        dt, delta, r = 0.01, 1.0, 0.5
        dist = np.full(1001, 0.6)
        rec = stopping_times(dist, dt, r, delta)
        assert len(rec.sigma_times) == 0 and len(rec.tau_times) == 0
        assert not rec.truncated  # never even hit the half level

    def test_spec_trace_sigma_and_tau(self):
        # distance 0.6 -> crosses 0.25 at t = 1.3 -> crosses 0.5 at t = 2.1
        # -> stays above 0.25: sigma_1 = 1.3, tau_1 = 4 (delta = 1, r = 0.5)
        dt, delta, r = 0.01, 1.0, 0.5
        times = np.arange(0, 10.0 + dt / 2, dt)
        knots = [0.0, 1.0, 1.3, 2.1, 10.0]
        vals = [0.6, 0.475, 0.25, 0.5, 1.29]
        dist = piecewise_distance(times, knots, vals)
        rec = stopping_times(dist, dt, r, delta)
        assert rec.sigma_times[0] == pytest.approx(1.3, abs=0.02)
        assert rec.tau_times[0] == pytest.approx(4.0, abs=1e-9)

    def test_dip_invalidates_candidate(self):
        # same start but the path dips below 0.25 inside (2.1, 3): tau must
        # wait for the next upcrossing of 0.5
        dt, delta, r = 0.01, 1.0, 0.5
        times = np.arange(0, 12.0 + dt / 2, dt)
        knots = [0.0, 1.3, 2.1, 2.5, 2.8, 5.0, 12.0]
        vals = [0.6, 0.25, 0.5, 0.2, 0.3, 0.8, 0.8]
        dist = piecewise_distance(times, knots, vals)
        rec = stopping_times(dist, dt, r, delta)
        assert rec.sigma_times[0] == pytest.approx(1.3, abs=0.02)
        # next 0.5-crossing after the dip sits at ~3.96; window pushes tau to 5
        assert rec.tau_times[0] >= 5.0 - 1e-9

    def test_interlacing_structure(self):
        rng = np.random.default_rng(6)
        dt, delta, r = 0.01, 0.1, 0.5
        # bounded random walk distance series
        steps = rng.normal(0, 0.02, size=4000)
        dist = np.abs(0.4 + np.cumsum(steps)) % 0.9 + 0.05
        rec = stopping_times(dist, dt, r, delta)
        merged = np.empty(len(rec.sigma_times) + len(rec.tau_times))
        merged[0::2], merged[1::2] = rec.sigma_times, rec.tau_times
        assert np.all(np.diff(merged) > 0)
        on_grid = rec.tau_times / delta
        np.testing.assert_allclose(on_grid, np.round(on_grid), atol=1e-9)

    def test_dt_must_divide_delta(self):
        with pytest.raises(AnalysisError):
            stopping_times(np.full(100, 0.6), 0.03, 0.5, 0.1)


class TestLyapunov:
    def test_constant_fields_zero_exponents(self):
        F = const_set(2, [(0.1, 0.0), (0.5, 0.2), (-0.3, 0.4)])
        path = make_path(7, 0, 2, 1e-3, (0, 40_001))
        est = lyapunov_spectrum(F, path, [0.2, 0.8], 40.0, segments=20)
        np.testing.assert_allclose(est.exponents, 0.0, atol=1e-12)
        assert est.sum_estimate == pytest.approx(0.0, abs=1e-12)

    def test_top_exponent_matches_spectrum_leader(self, demo_set):
        path = make_path(8, 0, 3, 1e-3, (0, 100_001))
        spec = lyapunov_spectrum(demo_set, path, [0.3, 0.6], 100.0, segments=20)
        top = lyapunov_top(demo_set, path, [0.3, 0.6], np.array([1.0, 0.0]),
                           100.0, segments=20)
        lo1, hi1 = top.top_ci
        lo2, hi2 = spec.ci[0]
        assert max(lo1, lo2) <= min(hi1, hi2)

    def test_unit_vector_required(self, demo_set):
        path = make_path(8, 1, 3, 1e-3, (0, 1000))
        with pytest.raises(AnalysisError):
            lyapunov_top(demo_set, path, [0.3, 0.6], np.array([2.0, 0.0]),
                         1.0, segments=2)


class TestOccupation:
    def test_far_apart_zero_fields(self):
        lift = np.tile(np.array([[0.1, 0.1], [0.6, 0.6]]), (101, 1, 1))
        assert occupation_fraction(lift, 0.01, 0.2) == 0.0

    def test_always_inside(self):
        lift = np.tile(np.array([[0.1, 0.1], [0.15, 0.1]]), (51, 1, 1))
        assert occupation_fraction(lift, 0.01, 0.2) == 1.0

    def test_two_point_equals_pair_module(self):
        rng = np.random.default_rng(9)
        lift = rng.random((100, 2, 2))
        from flowlab.geometry import torus_distance
        r = 0.3
        d = torus_distance(lift[:, 0, :], lift[:, 1, :])
        ind = (d <= r).astype(float)
        dt = 0.05
        want = float(np.trapezoid(ind, dx=dt) / ((len(lift) - 1) * dt))
        assert occupation_fraction(lift, dt, r) == pytest.approx(want, abs=1e-15)


class TestEstimateDA:
    def test_zero_functional_gives_zero(self):
        times = np.arange(1.0, 11.0)
        A = np.zeros((50, 10))
        slope, ci = estimate_DA_from_samples(times, A)
        assert slope == 0.0 and ci == (0.0, 0.0)

    def test_brownian_slope_recovered(self):
        # A_t = sigma W_t has E A_t^2 = sigma^2 t exactly
        rng = np.random.default_rng(10)
        times = np.arange(1.0, 21.0)
        sigma = 1.7
        W = rng.normal(size=(4000, 20)).cumsum(axis=1)
        A = sigma * W
        slope, ci = estimate_DA_from_samples(times, A, seed=1)
        assert ci[0] <= sigma ** 2 <= ci[1]
        assert slope == pytest.approx(sigma ** 2, rel=0.1)
