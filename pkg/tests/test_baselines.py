from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluforecast.baselines import (TREND_VARIATIONS, baseline_flat_forecast, baseline_trend_forecast,
                                   flat_quantiles, simulate_paths, trend_quantiles, variation_quantiles)
from fluforecast.core import MEDIAN_INDEX, Epiweek, ForecastTask, SignalKind
from fluforecast.exceptions import InsufficientDataError

HORIZONS = [0, 1, 2, 3]
LINEAR = 100.0 + 5.0 * np.arange(12)


class TestFlat:
    def test_constant_history(self):
        q = flat_quantiles([40.0] * 10, HORIZONS, draws=2000, seed=1)
        np.testing.assert_array_equal(q, 40.0)

    def test_median_near_last(self, rng):
        history = np.maximum(200 + np.cumsum(rng.normal(0, 10, 30)), 0)
        q = flat_quantiles(history, HORIZONS, draws=10_000, seed=2)
        np.testing.assert_allclose(q[:, MEDIAN_INDEX], history[-1], rtol=0.02)

    def test_width_grows(self, rng):
        history = 300 + np.cumsum(rng.normal(0, 15, 25))
        q = flat_quantiles(history, HORIZONS, draws=10_000, seed=3)
        width = q[:, -1] - q[:, 0]
        assert width[3] >= width[0]
        assert np.all(np.diff(width) >= 0)

    def test_translation_equivariant(self, rng):
        history = 500 + np.cumsum(rng.normal(0, 5, 20))
        a = flat_quantiles(history, HORIZONS, draws=5000, seed=4)
        b = flat_quantiles(history + 37.0, HORIZONS, draws=5000, seed=4)
        np.testing.assert_allclose(b, a + 37.0, atol=1e-9)

    def test_paths_clamped_stepwise(self):
        pool = np.array([-10.0, 10.0])
        paths = simulate_paths(5.0, pool, 6, 2000, np.random.default_rng(0))
        assert paths.min() >= 0
        # after a clamp the path restarts from zero, so odd multiples of 5 cannot recur once at 0
        hit = np.flatnonzero((paths == 0).any(axis=1))
        assert hit.size > 0
        row = paths[hit[0]]
        first_zero = np.flatnonzero(row == 0)[0]
        assert np.all(np.mod(row[first_zero:], 10) == 0)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            flat_quantiles([3.0], HORIZONS)

    def test_nan_weeks_dropped(self):
        q = flat_quantiles([10.0, np.nan, 10.0, 10.0], HORIZONS, draws=100)
        np.testing.assert_array_equal(q, 10.0)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0, 5000, allow_subnormal=False), min_size=2, max_size=30),
           st.integers(0, 2 ** 32 - 1))
    def test_outputs_valid(self, history, seed):
        q = flat_quantiles(history, HORIZONS, draws=500, seed=seed)
        assert q.min() >= 0
        assert np.all(np.diff(q, axis=1) >= 0)


class TestTrend:
    def test_grid(self):
        assert len(TREND_VARIATIONS) == 16
        assert len(set(TREND_VARIATIONS)) == 16
        assert sorted({v.window for v in TREND_VARIATIONS}) == [3, 4, 6, 8]

    def test_constant_history(self):
        np.testing.assert_allclose(trend_quantiles([25.0] * 12, HORIZONS, draws=1000), 25.0)

    def test_linear_trend_followed(self):
        last = LINEAR[-1]
        expect = last + 5.0 * (np.arange(4) + 1)
        for v in TREND_VARIATIONS:
            if v.symmetrize:
                continue
            med = variation_quantiles(LINEAR, v, HORIZONS, draws=4000, seed=0)[:, MEDIAN_INDEX]
            np.testing.assert_allclose(med, expect, rtol=0.10)
        q = trend_quantiles(LINEAR, HORIZONS, draws=4000, seed=0)
        assert np.all(q[:, MEDIAN_INDEX] > last)

    def test_symmetrized_subset_centered(self):
        last = LINEAR[-1]
        sym = [v for v in TREND_VARIATIONS if v.symmetrize]
        q_sym = trend_quantiles(LINEAR, HORIZONS, draws=4000, seed=0, variations=sym)
        np.testing.assert_allclose(q_sym[:, MEDIAN_INDEX], last, rtol=0.05)
        q_all = trend_quantiles(LINEAR, HORIZONS, draws=4000, seed=0)
        assert np.all(np.abs(q_all[:, MEDIAN_INDEX] - last - 5 * (np.arange(4) + 1))
                      < np.abs(q_sym[:, MEDIAN_INDEX] - last - 5 * (np.arange(4) + 1)))

    def test_short_history_falls_back_to_flat(self):
        short = [10.0, 12.0, 11.0, 15.0]
        np.testing.assert_array_equal(trend_quantiles(short, HORIZONS, draws=500, seed=9),
                                      flat_quantiles(short, HORIZONS, draws=500, seed=9))

    def test_seeded(self, rng):
        history = rng.uniform(0, 100, 20)
        a = trend_quantiles(history, HORIZONS, draws=1000, seed=5)
        b = trend_quantiles(history, HORIZONS, draws=1000, seed=5)
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.floats(0, 2000, allow_subnormal=False), min_size=9, max_size=20))
    def test_outputs_valid(self, history):
        q = trend_quantiles(history, HORIZONS, draws=300, seed=0)
        assert q.min() >= 0
        assert np.all(np.diff(q, axis=1) >= -1e-9)


class TestTaskInterface:
    def test_forecast_objects(self):
        ref = Epiweek(2024, 2)
        tasks = [ForecastTask(SignalKind.NHSN, "VT", ref, h) for h in (3, 0)]
        fcs = baseline_flat_forecast(LINEAR, tasks, draws=1000, seed=0)
        assert [f.task.horizon for f in fcs] == [3, 0]
        fcs = baseline_trend_forecast(LINEAR, tasks, draws=1000, seed=0)
        assert all(np.all(np.diff(f.as_array()) >= 0) for f in fcs)

    def test_mixed_series_rejected(self):
        ref = Epiweek(2024, 2)
        tasks = [ForecastTask(SignalKind.NHSN, "VT", ref, 0), ForecastTask(SignalKind.NHSN, "CA", ref, 0)]
        with pytest.raises(ValueError):
            baseline_flat_forecast(LINEAR, tasks)
