from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from fluforecast.core import SeriesKey, SignalKind
from fluforecast.exceptions import DegenerateScaleError, DomainError
from fluforecast.ingest import Dataset
from fluforecast.transform import (TransformParams, fit_all, fit_transform_params, inverse_standardize,
                                   read_params, standardize, standardize_dataset, write_params)

NHSN_CA = SeriesKey(SignalKind.NHSN, "CA")


def params(pop=1.0, scale=1.0, mean=0.0, power=0.25, key=NHSN_CA):
    return TransformParams(key, pop, scale, mean, power)


class TestFit:
    def test_constant_series(self):
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, [81.0] * 5)
        p = fit_transform_params(ds, NHSN_CA, population=100_000)
        assert p.scale_p95 == pytest.approx(3.0)
        assert p.center_mean == pytest.approx(1.0)

    def test_two_point_percentile(self):
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, [0.0, 16.0])
        p = fit_transform_params(ds, NHSN_CA, population=100_000)
        # fourth roots {0, 2}; linear interpolation at rank 0.95 * (n - 1)
        assert p.scale_p95 == pytest.approx(1.9)
        assert p.center_mean == pytest.approx(1.0 / 1.9)

    def test_flusurv_ignores_population(self, registry):
        key = SeriesKey(SignalKind.FLUSURV, "CA")
        ds = make_dataset(SignalKind.FLUSURV, "CA", 201801, [0.0, 16.0])
        p = fit_transform_params(ds, key, registry)
        assert p.divisor == 1.0
        assert p.scale_p95 == pytest.approx(1.9)

    def test_nhsn_uses_registry_population(self, registry):
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, [10.0, 20.0, 30.0])
        p = fit_transform_params(ds, NHSN_CA, registry)
        assert p.population_100k == registry.population("CA") / 100_000

    def test_all_zero_series_is_degenerate(self):
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, [0.0] * 10)
        with pytest.raises(DegenerateScaleError):
            fit_transform_params(ds, NHSN_CA, population=100_000)

    def test_fit_all_skips_degenerate(self, registry):
        ds = Dataset.concat([make_dataset(SignalKind.NHSN, "CA", 202301, [0.0] * 5),
                             make_dataset(SignalKind.NHSN, "TX", 202301, [1.0, 5.0, 3.0])])
        fitted = fit_all(ds, registry)
        assert list(fitted) == [SeriesKey(SignalKind.NHSN, "TX")]
        out = standardize_dataset(ds, fitted)
        assert set(out.frame["location"]) == {"TX"}

    def test_raw_percentile_option(self):
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, [0.0, 16.0])
        p = fit_transform_params(ds, NHSN_CA, population=100_000, percentile_on="raw")
        assert p.scale_p95 == pytest.approx(15.2 ** 0.25)


class TestStandardize:
    def test_zero_maps_to_negative_center(self):
        p = params(mean=0.7)
        assert standardize(0.0, p) == pytest.approx(-0.7)
        assert inverse_standardize(-0.7, p) == pytest.approx(0.0, abs=1e-12)

    def test_examples(self):
        assert standardize(16.0, params()) == pytest.approx(2.0)
        assert inverse_standardize(2.0, params(pop=3.0)) == pytest.approx(48.0)

    def test_clamp_below_zero_point(self):
        p = params(mean=0.5)
        assert inverse_standardize(-3.0, p) == 0.0
        np.testing.assert_array_equal(inverse_standardize(np.array([-1.0, -0.6]), p), [0.0, 0.0])

    def test_negative_counts_rejected(self):
        with pytest.raises(DomainError):
            standardize(-1.0, params())

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e6, allow_subnormal=False), st.floats(0.1, 400), st.floats(0.05, 20),
           st.floats(-2, 2), st.sampled_from([0.25, 1.0]))
    def test_round_trip(self, z, pop, scale, mean, power):
        p = params(pop, scale, mean, power)
        back = inverse_standardize(standardize(z, p), p)
        assert back == pytest.approx(z, rel=1e-9, abs=1e-9)

    def test_monotone(self, rng):
        p = params(pop=3.9, scale=1.3, mean=0.8)
        z = np.sort(rng.uniform(0, 1e4, 1000))
        zt = standardize(z, p)
        assert np.all(np.diff(zt) > 0)
        grid = np.linspace(-3, 3, 500)
        assert np.all(np.diff(inverse_standardize(grid, p)) >= 0)

    def test_power_one_is_affine_on_rates(self):
        p = params(pop=2.0, scale=4.0, mean=1.0, power=1.0)
        assert standardize(8.0, p) == pytest.approx(0.0)


class TestSidecar:
    def test_round_trip(self, tmp_path):
        ps = {NHSN_CA: params(3.9, 1.234567890123, 0.5),
              SeriesKey(SignalKind.FLUSURV, "CA"): params(1.0, 2.0, 0.1, key=SeriesKey(SignalKind.FLUSURV, "CA"))}
        path = tmp_path / "params.csv"
        write_params(ps, path)
        assert read_params(path) == ps
