from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from conftest import make_dataset
from fluforecast.core import LEVELS, Epiweek, ForecastTask, SeriesKey, SignalKind
from fluforecast.exceptions import FormatError, InsufficientDataError
from fluforecast.features import FeatureMatrix, feature_names
from fluforecast.gbqr import (BagEnsemble, BoostedQuantileModel, GbqrHyperparams, GbqrVariant, RegressionTree,
                              bag_size, dumps_ensemble, feature_importance, fit_bagged, fit_boosted_quantile,
                              loads_ensemble, predict_tasks, sample_bag_seasons)
from fluforecast.gbqr._kernels import central_quantile, pinball_mean
from fluforecast.transform import fit_all, standardize_dataset

SMALL = GbqrHyperparams(num_rounds=20, max_leaves=8, min_leaf_count=5)


def seasonal_rows(rng, n_seasons=4, per_season=60, n_features=3, noise=1.0):
    X = rng.normal(size=(n_seasons * per_season, n_features))
    y = 2.0 * X[:, 0] + noise * rng.normal(size=len(X))
    seasons = np.repeat([f"{2010 + s}/{(11 + s) % 100:02d}" for s in range(n_seasons)], per_season)
    names = [f"f{j}" for j in range(n_features)]
    return FeatureMatrix(names, X, pd.DataFrame({"season": seasons}), y)


class TestCentralQuantile:
    def test_midpoint_when_alpha_n_integer(self):
        assert central_quantile(np.array([4.0, 1.0, 3.0, 2.0]), 0.5) == 2.5
        assert central_quantile(np.array([1.0, 2.0, 3.0]), 0.5) == 2.0
        assert central_quantile(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), 0.1) == 1.0

    def test_minimizes_pinball(self, rng):
        y = rng.normal(size=37)
        for alpha in (0.05, 0.3, 0.5, 0.9):
            c = central_quantile(y, alpha)
            best = pinball_mean(y, np.full(y.size, c), alpha)
            for other in np.linspace(-3, 3, 61):
                assert best <= pinball_mean(y, np.full(y.size, other), alpha) + 1e-12


class TestBooster:
    def test_constant_target(self, rng):
        X = rng.normal(size=(50, 3))
        for alpha in (0.1, 0.5, 0.9):
            m = fit_boosted_quantile(X, np.full(50, 3.25), alpha, SMALL)
            np.testing.assert_allclose(m.predict(rng.normal(size=(20, 3))), 3.25)

    def test_step_split_threshold(self):
        x = np.array([-2.0, -1.5, -1.0, -0.5, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        y = 10.0 * (x > 0)
        m = fit_boosted_quantile(x[:, None], y, 0.5, GbqrHyperparams(num_rounds=1, min_leaf_count=1))
        root = m.trees[0]
        assert root.feature[0] == 0
        assert 0.0 < root.threshold[0] <= 1.0
        pred = m.predict(x[:, None])
        assert np.all(pred[x > 0] > pred[x <= 0])

    def test_loss_trace_nonincreasing(self, rng):
        X = rng.normal(size=(300, 4))
        y = X[:, 0] ** 2 + rng.standard_t(3, size=300)
        for alpha in (0.025, 0.5, 0.975):
            m = fit_boosted_quantile(X, y, alpha, GbqrHyperparams(num_rounds=40, min_leaf_count=5))
            assert np.all(np.diff(m.loss_trace) <= 1e-12)
            assert m.loss_trace[-1] < m.loss_trace[0]

    def test_piecewise_constant(self, rng):
        X = rng.normal(size=(200, 2))
        y = np.sin(2 * X[:, 0]) + 0.1 * rng.normal(size=200)
        m = fit_boosted_quantile(X, y, 0.5, SMALL)
        thresholds = np.unique(np.concatenate([t.threshold[t.feature == 0] for t in m.trees]))
        assert thresholds.size >= 2
        lo, hi = thresholds[thresholds.size // 2 - 1], thresholds[thresholds.size // 2]
        probe = np.array([[lo + 0.25 * (hi - lo), 0.3], [lo + 0.75 * (hi - lo), 0.3]])
        p = m.predict(probe)
        assert p[0] == p[1]

    def test_missing_values_route(self, rng):
        X = rng.normal(size=(300, 2))
        y = np.where(X[:, 0] > 0, 5.0, 0.0)
        X[::7, 0] = np.nan
        y[::7] = 5.0
        m = fit_boosted_quantile(X, y, 0.5, SMALL)
        pred = m.predict(np.array([[np.nan, 0.0], [-1.0, 0.0], [np.nan, np.nan]]))
        assert np.isfinite(pred).all()
        assert pred[0] > pred[1]

    def test_unseen_missing_defaults_left(self, rng):
        x = rng.normal(size=(100, 1))
        m = fit_boosted_quantile(x, np.where(x[:, 0] > 0, 1.0, 0.0), 0.5, SMALL)
        assert m.predict(np.array([[np.nan]]))[0] == m.predict(np.array([[-5.0]]))[0]

    def test_rejects_bad_input(self, rng):
        with pytest.raises(ValueError):
            fit_boosted_quantile(rng.normal(size=(5, 1)), np.array([1, 2, np.nan, 3, 4.0]), 0.5)
        with pytest.raises(ValueError):
            fit_boosted_quantile(rng.normal(size=(5, 1)), np.arange(5.0), 1.0)

    def test_tree_preorder_round_trip(self, rng):
        X = rng.normal(size=(200, 3))
        m = fit_boosted_quantile(X, X[:, 1] + rng.normal(size=200), 0.5, SMALL)
        for t in m.trees:
            back = RegressionTree.from_preorder(t.preorder())
            np.testing.assert_array_equal(back.predict(X), t.predict(X))


class TestBagging:
    def test_bag_size(self):
        assert bag_size(10) == 7
        assert bag_size(3) == 3
        assert bag_size(2) == 2
        chosen = sample_bag_seasons([f"s{i}" for i in range(10)], 5, 0)
        assert len(chosen) == len(set(chosen)) == 7

    def test_needs_two_seasons(self, rng):
        rows = seasonal_rows(rng, n_seasons=1)
        with pytest.raises(InsufficientDataError):
            fit_bagged(rows, levels=(0.5,), hp=SMALL, num_bags=2)

    def test_determinism_and_threads(self, rng):
        rows = seasonal_rows(rng)
        a = fit_bagged(rows, levels=(0.1, 0.5, 0.9), hp=SMALL, master_seed=7, num_bags=6)
        b = fit_bagged(rows, levels=(0.1, 0.5, 0.9), hp=SMALL, master_seed=7, num_bags=6, threads=3)
        assert a.bag_seasons == b.bag_seasons
        assert dumps_ensemble(a) == dumps_ensemble(b)
        np.testing.assert_array_equal(a.predict(rows.X), b.predict(rows.X))
        c = fit_bagged(rows, levels=(0.5,), hp=SMALL, master_seed=8, num_bags=6)
        assert c.bag_seasons != a.bag_seasons

    def test_identical_seasons_match_single_fit(self, rng):
        per = 80
        X1 = rng.normal(size=(per, 2))
        y1 = X1[:, 0] + rng.normal(size=per)
        n_seasons = 10
        rows = FeatureMatrix(["a", "b"], np.tile(X1, (n_seasons, 1)),
                             pd.DataFrame({"season": np.repeat([f"s{i}" for i in range(n_seasons)], per)}),
                             np.tile(y1, n_seasons))
        ens = fit_bagged(rows, levels=(0.5,), hp=SMALL, master_seed=3, num_bags=5)
        single = fit_boosted_quantile(np.tile(X1, (7, 1)), np.tile(y1, 7), 0.5, SMALL)
        probe = rng.normal(size=(30, 2))
        np.testing.assert_allclose(ens.predict(probe)[:, 0], single.predict(probe), atol=1e-12)

    def test_even_bag_median_is_midpoint(self):
        models = [[BoostedQuantileModel(0.5, float(b), 0.1)] for b in range(1, 101)]
        ens = BagEnsemble((0.5,), SMALL, GbqrVariant(), 0, ["x"], [()] * 100, models)
        assert ens.predict(np.zeros((1, 1)))[0, 0] == 50.5


class TestPredictTasks:
    def test_zero_change_returns_last_count(self, registry, rng):
        counts = rng.uniform(20, 200, 40).round()
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, counts)
        params = fit_all(ds, registry)
        zt = standardize_dataset(ds, params)
        ref = Epiweek(2023, 1) + 40
        names = feature_names(registry)
        models = [[BoostedQuantileModel(a, 0.0, 0.1) for a in LEVELS] for _ in range(3)]
        ens = BagEnsemble(tuple(LEVELS), SMALL, GbqrVariant(), 0, names, [()] * 3, models)
        tasks = [ForecastTask(SignalKind.NHSN, "CA", ref, h) for h in range(4)]
        out = predict_tasks(ens, tasks, zt, params, registry)
        assert len(out) == 4
        for fc in out:
            np.testing.assert_allclose(fc.as_array(), counts[-1], rtol=1e-9)

    def test_missing_last_week_skipped(self, registry, rng):
        ds = make_dataset(SignalKind.NHSN, "CA", 202301, rng.uniform(20, 200, 40))
        params = fit_all(ds, registry)
        zt = standardize_dataset(ds, params)
        names = feature_names(registry)
        ens = BagEnsemble(tuple(LEVELS), SMALL, GbqrVariant(), 0, names, [()],
                          [[BoostedQuantileModel(a, 0.0, 0.1) for a in LEVELS]])
        late = [ForecastTask(SignalKind.NHSN, "CA", Epiweek(2023, 1) + 45, 0)]
        assert predict_tasks(ens, late, zt, params, registry) == []


class TestImportance:
    def test_no_splits(self, rng):
        rows = seasonal_rows(rng)
        rows.y = np.ones(len(rows))
        ens = fit_bagged(rows, levels=(0.5,), hp=SMALL, num_bags=3)
        assert (feature_importance(ens) == 0).all()

    def test_direct_count(self):
        tree = RegressionTree(np.array([1, 1, -1, -1, -1]), np.array([0.0, -1.0, 0, 0, 0]),
                              np.ones(5, bool), np.array([1, 2, -1, -1, -1]), np.array([4, 3, -1, -1, -1]),
                              np.zeros(5))
        m = BoostedQuantileModel(0.5, 0.0, 0.1, [tree])
        np.testing.assert_array_equal(m.split_counts(3), [0, 2, 0])

    def test_accounting_identity(self, rng):
        rows = seasonal_rows(rng)
        ens = fit_bagged(rows, levels=(0.25, 0.75), hp=SMALL, num_bags=4)
        imp = feature_importance(ens)
        internal = np.mean([sum(t.n_internal for t in m.trees) for bag in ens.models for m in bag])
        assert imp.sum() == pytest.approx(internal)
        assert imp.idxmax() == "f0"


class TestSerialization:
    def test_round_trip(self, rng):
        rows = seasonal_rows(rng)
        ens = fit_bagged(rows, levels=(0.1, 0.9), hp=SMALL, num_bags=3,
                         variant=GbqrVariant("no_level"), master_seed=11)
        data = dumps_ensemble(ens)
        back = loads_ensemble(data)
        assert back.variant == ens.variant and back.master_seed == 11 and back.hp == SMALL
        np.testing.assert_array_equal(back.predict(rows.X), ens.predict(rows.X))
        assert dumps_ensemble(back) == data

    def test_rejects_foreign_payload(self):
        import gzip
        with pytest.raises(FormatError):
            loads_ensemble(gzip.compress(b'{"format": "other"}'))


class TestVariant:
    def test_flags(self):
        assert GbqrVariant("no_level").no_level and GbqrVariant("no_level").model_id == "gbqr_no_level"
        assert GbqrVariant("by_location", "CA").by_location
        assert GbqrVariant.from_dict(GbqrVariant("only_nhsn").to_dict()) == GbqrVariant("only_nhsn")
        assert GbqrVariant().model_id == "gbqr"
        assert SeriesKey(SignalKind.NHSN, "CA") == SeriesKey(SignalKind.NHSN, "CA")
