"""Skew-normal schedule tests: quadrature oracles for density and moments,
a bisection oracle for the amplitude solve, and shape properties."""

import csv
import math

import numpy as np
import pytest
from scipy.integrate import quad

from structdrop import (ParameterError, SkewNormalParams, build_schedule,
                        save_schedule_csv, skew_moments, skew_pdf,
                        solve_location_scale)


class TestSkewPdf:
    def test_zero_shape_is_normal(self):
        params = SkewNormalParams(1.5, 2.0, 0.0)
        ys = np.linspace(-6, 9, 50)
        normal = np.exp(-0.5 * ((ys - 1.5) / 2.0) ** 2) / (2.0 * math.sqrt(2 * math.pi))
        np.testing.assert_allclose(skew_pdf(ys, params), normal, rtol=1e-12)

    def test_standard_peak_value(self):
        assert skew_pdf(0.0, SkewNormalParams(0.0, 1.0, 0.0)) == \
            pytest.approx(1.0 / math.sqrt(2 * math.pi), rel=1e-12)

    @pytest.mark.parametrize("shape", [-3.0, -1.0, 0.0, 1.0, 3.0])
    def test_integrates_to_one(self, shape):
        params = SkewNormalParams(0.7, 1.3, shape)
        lo, hi = 0.7 - 10 * 1.3, 0.7 + 10 * 1.3
        total, _ = quad(lambda y: float(skew_pdf(y, params)), lo, hi, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_scale_must_be_positive(self):
        with pytest.raises(ParameterError):
            SkewNormalParams(0.0, 0.0, 1.0)


class TestSkewMoments:
    def test_zero_shape(self):
        mean, var = skew_moments(SkewNormalParams(2.0, 3.0, 0.0))
        assert mean == pytest.approx(2.0)
        assert var == pytest.approx(9.0)

    def test_large_shape_limit(self):
        mean, _ = skew_moments(SkewNormalParams(0.0, 1.0, 1e9))
        assert mean == pytest.approx(math.sqrt(2 / math.pi), abs=1e-6)

    @pytest.mark.parametrize("shape", [-3.0, -1.0, 0.0, 1.0, 2.0, 3.0])
    def test_matches_quadrature(self, shape):
        params = SkewNormalParams(0.0, 1.0, shape)
        lo, hi = -12.0, 12.0
        mean_q, _ = quad(lambda y: y * float(skew_pdf(y, params)), lo, hi, limit=200)
        mean, var = skew_moments(params)
        assert mean == pytest.approx(mean_q, abs=1e-6)
        var_q, _ = quad(lambda y: (y - mean_q) ** 2 * float(skew_pdf(y, params)),
                        lo, hi, limit=200)
        assert var == pytest.approx(var_q, abs=1e-6)


class TestSolveLocationScale:
    def test_zero_shape_identity(self):
        params = solve_location_scale(0.3, 0.25, 0.0)
        assert (params.location, params.scale) == (pytest.approx(0.3),
                                                   pytest.approx(0.25))

    def test_round_trip_shape_one(self):
        params = solve_location_scale(0.0, 1.0, 1.0)
        mean, var = skew_moments(params)
        assert mean == pytest.approx(0.0, abs=1e-9)
        assert var == pytest.approx(1.0, abs=1e-9)

    def test_round_trip_shape_three(self):
        params = solve_location_scale(0.4, 0.2, 3.0)
        s0 = math.sqrt(1.0 - (2 / math.pi) * (9 / 10))
        assert params.scale == pytest.approx(0.2 / s0, rel=1e-12)
        mean, var = skew_moments(params)
        assert mean == pytest.approx(0.4, abs=1e-9)
        assert var == pytest.approx(0.04, abs=1e-9)


def amplitude_bisection_oracle(epochs, dens, floor, target_mean):
    """Solve mean(floor + c * dens) = target_mean by bisection on c."""
    lo, hi = 0.0, 1e6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (floor + mid * dens).mean() < target_mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestBuildSchedule:
    def test_constant_when_mean_is_floor(self):
        sched = build_schedule(20, 0.3, 0.3, 0.3, 3.0)
        np.testing.assert_allclose(sched.ratios, 0.3)
        assert not sched.clamped

    def test_unimodal_and_matches_amplitude_oracle(self):
        sched = build_schedule(100, 0.4, 0.1, 0.6, 3.0)
        dens = skew_pdf(np.arange(1, 101, dtype=float), sched.params)
        c_mean = amplitude_bisection_oracle(np.arange(1, 101), dens, 0.1, 0.4)
        c_cap = (0.6 - 0.1) / dens.max()
        expected = 0.1 + min(c_mean, c_cap) * dens
        np.testing.assert_allclose(sched.ratios, expected, atol=1e-7)
        diffs = np.diff(sched.ratios)
        signs = np.sign(diffs[diffs != 0])
        assert (np.diff(signs) != 0).sum() == 1  # rises then falls

    def test_mean_constraint_when_unclamped(self):
        sched = build_schedule(100, 0.25, 0.1, 0.6, 3.0)
        assert not sched.clamped
        assert sched.ratios.mean() == pytest.approx(0.25, abs=1e-6)
        assert sched.achieved_mean_ratio == pytest.approx(0.25, abs=1e-6)

    def test_endpoints_near_floor(self):
        sched = build_schedule(100, 0.25, 0.1, 0.6, 3.0)
        assert sched.ratios[0] <= 1.2 * 0.1 + 1e-3
        assert sched.ratios[-1] <= 1.2 * 0.1 + 1e-3

    def test_zero_shape_symmetric_bell(self):
        # mode pinned to the exact center epoch: the table mirrors
        sched = build_schedule(99, 0.2, 0.05, 0.6, 0.0, mode_fraction=50 / 99)
        np.testing.assert_allclose(sched.ratios, sched.ratios[::-1], atol=1e-9)
        assert int(np.argmax(sched.ratios)) == 49

    def test_clamped_mean_re_reported(self):
        sched = build_schedule(100, 0.4, 0.1, 0.6, 3.0)
        assert sched.clamped
        assert sched.ratios.max() <= 0.6 + 1e-12
        assert sched.achieved_mean_ratio == pytest.approx(sched.ratios.mean())
        assert sched.achieved_mean_ratio < 0.4

    def test_unimodal_across_shapes(self):
        for shape in [0.0, 1.0, 2.0, 3.0, 5.0]:
            sched = build_schedule(60, 0.2, 0.05, 0.5, shape)
            diffs = np.diff(sched.ratios)
            signs = np.sign(diffs[diffs != 0])
            assert (np.diff(signs) != 0).sum() <= 1, f"shape={shape}"

    def test_infeasible_mean_rejected(self):
        with pytest.raises(ParameterError):
            build_schedule(50, 0.7, 0.1, 0.6, 3.0)
        with pytest.raises(ParameterError):
            build_schedule(50, 0.05, 0.1, 0.6, 3.0)

    def test_ratio_at_bounds(self):
        sched = build_schedule(10, 0.2, 0.1, 0.6, 3.0)
        assert sched.ratio_at(1) == sched.ratios[0]
        with pytest.raises(ParameterError):
            sched.ratio_at(11)


class TestScheduleCsv:
    def test_round_trips_exactly(self, tmp_path):
        sched = build_schedule(25, 0.3, 0.1, 0.6, 2.0)
        path = tmp_path / "sched.csv"
        save_schedule_csv(sched, path)
        with open(path) as fh:
            reader = csv.reader(fh)
            assert next(reader) == ["epoch", "ratio"]
            rows = list(reader)
        assert [int(r[0]) for r in rows] == list(range(1, 26))
        np.testing.assert_array_equal([float(r[1]) for r in rows], sched.ratios)
