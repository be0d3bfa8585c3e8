"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
from __future__ import annotations

import contextlib
import math
import shutil
import time
from itertools import permutations
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from fluforecast.baselines import flat_quantiles
from fluforecast.cli import main
from fluforecast.config import GROUPS, MODEL_LABELS, load_config, with_overrides
from fluforecast.core import LEVELS, Epiweek, ForecastTask, QuantileForecast, SeriesKey, SignalKind
from fluforecast.ensemble import quantile_average
from fluforecast.features import FeatureMatrix, rolling_mean, taylor_coeffs
from fluforecast.gbqr import GbqrHyperparams, dumps_ensemble, fit_bagged
from fluforecast.arx import ArxConfig, fit_arx_arrays, spike_of_ordinals
from fluforecast.ingest import burden_scale_factor, load_burden_table
from fluforecast.pipeline import run_backtest
from fluforecast.score import quantile_score, wis
from fluforecast.transform import TransformParams, inverse_standardize, standardize
from oracles import brute_force_wis

pytestmark = pytest.mark.acceptance


@pytest.fixture
def criterion(capsys):
    """Run a block of assertions and print one PASS/FAIL line for it."""
    @contextlib.contextmanager
    def run(number: int, title: str):
        start = time.perf_counter()
        notes = []
        try:
            yield notes
        except BaseException:
            with capsys.disabled():
                print(f"\n[acceptance {number:2d}] FAIL  {title}  {'; '.join(notes)}")
            raise
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] PASS  {title}  ({elapsed:.1f}s) {'; '.join(notes)}")
    return run


# Reference burden rate per 100k and scale factor per season, rounded to one decimal.
PUBLISHED_BURDEN = [
    ("2010/11", 93.8, 4.3), ("2011/12", 44.9, 5.2), ("2012/13", 181.6, 4.1), ("2013/14", 110.8, 3.1),
    ("2014/15", 185.4, 2.9), ("2015/16", 87.3, 2.8), ("2016/17", 154.8, 2.5), ("2017/18", 218.5, 2.1),
    ("2018/19", 116.3, 1.8), ("2019/20", 118.8, 1.8), ("2022/23", 142.5, 2.3),
]


def test_01_burden_table(criterion):
    with criterion(1, "burden table reproduction") as notes:
        start = time.perf_counter()
        records = {r.season: r for r in load_burden_table()}
        assert len(records) == 11
        worst_rate = worst_alpha = 0.0
        for season, rate, alpha in PUBLISHED_BURDEN:
            rec = records[season]
            worst_rate = max(worst_rate, abs(rec.burden_rate - rate))
            worst_alpha = max(worst_alpha, abs(burden_scale_factor(rec) - alpha))
        notes.append(f"max |rate err| {worst_rate:.3f}, max |alpha err| {worst_alpha:.3f}")
        assert worst_rate <= 0.05 and worst_alpha <= 0.05
        assert time.perf_counter() - start < 1.0


def test_02_metric_oracle(criterion):
    with criterion(2, "WIS equals brute-force pinball expansion") as notes:
        rng = np.random.default_rng(42)
        levels = LEVELS.as_array()
        worst = 0.0
        for _ in range(1000):
            q = np.sort(rng.gamma(2.0, 50.0, size=len(levels)))
            z = float(rng.choice([rng.gamma(2.0, 50.0), q[rng.integers(len(q))], 0.0]))
            worst = max(worst, abs(wis(q, z, levels) - brute_force_wis(q, z, levels)))
        notes.append(f"max |diff| {worst:.1e}")
        assert worst <= 1e-12
        for q, z in rng.uniform(0, 500, size=(1000, 2)):
            assert quantile_score(q, z, 0.5) == 0.5 * abs(q - z)


def test_03_taylor_exactness(criterion):
    with criterion(3, "Taylor features on noise-free polynomials") as notes:
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            w = int(rng.integers(3, 9))
            t = int(rng.integers(w - 1, 30))
            beta = rng.normal(0, 2, size=3)
            u = np.arange(30) - t
            series = beta[0] + beta[1] * u + beta[2] * u ** 2 / 2
            fit = taylor_coeffs(series, w, 2, t)
            worst = max(worst, float(np.max(np.abs(np.array(fit.coefficients) - beta))))
        notes.append(f"degree 2 max coef err {worst:.1e}")
        assert worst <= 1e-8
        worst0 = 0.0
        for _ in range(100):
            series = rng.normal(0, 5, size=40)
            w = int(rng.integers(1, 10))
            t = int(rng.integers(w - 1, 40))
            worst0 = max(worst0, abs(taylor_coeffs(series, w, 0, t).coefficients[0] - rolling_mean(series, w, t)))
        notes.append(f"degree 0 vs rolling mean {worst0:.1e}")
        assert worst0 <= 1e-12


def test_04_transform_round_trip(criterion):
    with criterion(4, "standardize / inverse round trip") as notes:
        rng = np.random.default_rng(42)
        series = [
            TransformParams(SeriesKey(SignalKind.NHSN, "CA"), 390.3, 1.21, 0.48),
            TransformParams(SeriesKey(SignalKind.NHSN, "VT"), 6.47, 0.93, 0.41),
            TransformParams(SeriesKey(SignalKind.FLUSURV, "NY"), 196.8, 1.75, 0.55),
            TransformParams(SeriesKey(SignalKind.ILIPLUS, "US"), 3332.9, 1.4, 0.6),
        ]
        worst = 0.0
        for p in series:
            z = np.concatenate([[0.0, 1e-12, 1e-6], rng.gamma(1.5, 200.0, size=10_000)])
            back = inverse_standardize(standardize(z, p), p)
            nz = z > 0
            worst = max(worst, float(np.max(np.abs(back[nz] - z[nz]) / z[nz])))
            assert back[0] == 0.0
            # the clamp boundary: the transformed value of a zero count maps back to exactly zero
            zero_point = standardize(0.0, p)
            assert inverse_standardize(zero_point, p) == 0.0
            assert np.all(inverse_standardize(zero_point - rng.uniform(0, 5, 100), p) == 0.0)
        notes.append(f"max rel err {worst:.1e}")
        assert worst <= 1e-9


def _heteroscedastic(rng, n):
    X = rng.uniform(-2, 2, size=(n, 5))
    mu = np.sin(1.5 * X[:, 0]) + 0.5 * X[:, 1]
    return X, mu + (1 + np.abs(X[:, 0])) * rng.standard_normal(n)


def test_05_gbqr_quantile_recovery(criterion):
    with criterion(5, "GBQR held-out-season coverage") as notes:
        rng = np.random.default_rng(42)
        X, y = _heteroscedastic(rng, 5000)
        seasons = np.repeat(["2015/16", "2016/17", "2017/18"], [1667, 1667, 1666])
        rows = FeatureMatrix([f"x{j}" for j in range(5)], X, pd.DataFrame({"season": seasons}), y)
        levels = (0.1, 0.5, 0.9)
        ens = fit_bagged(rows, levels=levels, hp=GbqrHyperparams(), master_seed=42, num_bags=10)
        X_new, y_new = _heteroscedastic(rng, 1667)
        coverage = (y_new[:, None] <= ens.predict(X_new)).mean(axis=0)
        notes.append("coverage " + ", ".join(f"{a}: {c:.4f}" for a, c in zip(levels, coverage)))
        assert np.all(np.abs(coverage - np.array(levels)) <= 0.05)


def test_06_gbqr_determinism(criterion, tmp_path, mini_dir):
    with criterion(6, "GBQR byte-identical across reruns and thread counts") as notes:
        config = tmp_path / "config.toml"
        text = (mini_dir / "config.toml").read_text()
        config.write_text(text.replace("num_bags = 10", "num_bags = 4").replace("num_rounds = 50", "num_rounds = 25"))
        for name in ("nhsn", "flusurv", "ili", "positivity"):
            shutil.copy(mini_dir / f"{name}.csv", tmp_path)
        runs = {"t1": "1", "t1_again": "1", "t4": "4"}
        for out, threads in runs.items():
            assert main(["forecast", "--config", str(config), "--date", "202352", "--variants", "gbqr",
                         "--threads", threads, "--out", str(tmp_path / out), "--save-models"]) == 0
        files = [Path("models/2023-12-30-gbqr.json.gz"), Path("forecasts/gbqr/2023-12-30-gbqr.csv")]
        for f in files:
            ref = (tmp_path / "t1" / f).read_bytes()
            assert (tmp_path / "t1_again" / f).read_bytes() == ref, f
            assert (tmp_path / "t4" / f).read_bytes() == ref, f
        notes.append(f"{len(files)} files identical over 3 runs")

        rng = np.random.default_rng(42)
        X, y = _heteroscedastic(rng, 2000)
        rows = FeatureMatrix([f"x{j}" for j in range(5)], X,
                             pd.DataFrame({"season": np.repeat([f"201{k}/1{k + 1}" for k in range(4)], 500)}), y)
        hp = GbqrHyperparams(num_rounds=30)
        a = fit_bagged(rows, levels=(0.1, 0.9), hp=hp, master_seed=9, num_bags=8, threads=1)
        b = fit_bagged(rows, levels=(0.1, 0.9), hp=hp, master_seed=9, num_bags=8, threads=4)
        assert dumps_ensemble(a) == dumps_ensemble(b)
        assert a.predict(X).tobytes() == b.predict(X).tobytes()


def test_07_arx_recovery(criterion):
    with criterion(7, "ARX AR(2) parameter recovery") as notes:
        rng = np.random.default_rng(42)
        T, burn = 500, 200
        z = np.zeros(T + burn)
        for t in range(2, T + burn):
            z[t] = 0.5 * z[t - 1] + 0.3 * z[t - 2] + 0.1 * rng.standard_normal()
        z = z[burn:]
        x = spike_of_ordinals(np.arange(3000, 3000 + T))
        post = fit_arx_arrays({"CA": z}, {"CA": x}, ArxConfig(order=2, seed=42))
        means = post.alpha.mean(axis=0)
        sigma = float(post.sigma_eps.mean())
        rhat = float(post.report["rhat"].max())
        notes.append(f"alpha {means.round(3).tolist()}, sigma {sigma:.3f}, max R-hat {rhat:.3f}")
        assert abs(means[0] - 0.5) <= 0.1 and abs(means[1] - 0.3) <= 0.1
        assert abs(sigma - 0.1) <= 0.1
        assert rhat < 1.1


def test_08_flat_baseline_symmetry(criterion):
    with criterion(8, "Baseline-flat median tracks the last observation") as notes:
        rng = np.random.default_rng(42)
        history = np.maximum(300 + np.cumsum(rng.normal(0, 8, size=60)), 0)
        q = flat_quantiles(history, draws=10_000, seed=42)
        rel = np.abs(q[:, LEVELS.index(0.5)] - history[-1]) / history[-1]
        notes.append(f"max rel median dev {rel.max():.4f}")
        assert np.all(rel <= 0.02)


def test_09_ensemble_identities(criterion):
    with criterion(9, "quantile averaging identities") as notes:
        rng = np.random.default_rng(42)
        task = ForecastTask(SignalKind.NHSN, "CA", Epiweek(2024, 2), 1)
        for _ in range(1000):
            k = int(rng.integers(1, 5))
            members = [QuantileForecast.repaired(task, np.sort(rng.gamma(2.0, 40.0, 23))) for _ in range(k)]
            avg = quantile_average(members).as_array()
            single = members[0]
            np.testing.assert_allclose(quantile_average([single] * k).as_array(), single.as_array(), rtol=1e-12)
            for perm in list(permutations(range(k)))[:6]:
                np.testing.assert_allclose(quantile_average([members[i] for i in perm]).as_array(), avg,
                                           rtol=1e-12)
            stack = np.stack([m.as_array() for m in members])
            assert np.all(avg >= stack.min(axis=0) - 1e-9) and np.all(avg <= stack.max(axis=0) + 1e-9)
        notes.append("1000 member sets")


CANARY_DATE = 202402


@pytest.fixture(scope="module")
def mini_backtest(tmp_path_factory, mini_dir):
    """Full Experiment A backtest on the packaged mini data."""
    root = tmp_path_factory.mktemp("mini")
    cfg = with_overrides(load_config(mini_dir / "config.toml"), output=root / "out")
    start = time.perf_counter()
    result = run_backtest(cfg)
    elapsed = time.perf_counter() - start
    return root, result, elapsed


def test_10_mini_backtest(criterion, mini_backtest, mini_dir, tmp_path):
    root, result, elapsed = mini_backtest
    table = result.scores.table
    with criterion(10, "mini backtest: Experiment A, Flusion beats Baseline-flat, no lookahead") as notes:
        assert not result.failures
        assert elapsed < 30 * 60
        assert set(table["model_id"]) == set(GROUPS["experiment_a"])
        assert list(table["Model"]) == [MODEL_LABELS[m] for m in table["model_id"]]
        written = pd.read_csv(root / "out" / "score_table.csv")
        assert set(written["model_id"]) == set(GROUPS["experiment_a"])
        mwis = table.set_index("model_id")["MWIS"]
        notes.append(f"Flusion MWIS {mwis['flusion']:.2f} vs Baseline-flat {mwis['baseline_flat']:.2f}, "
                     f"backtest {elapsed / 60:.1f} min")
        assert mwis["flusion"] < mwis["baseline_flat"]

        # canary: rewrite every value from the reference week on and rerun that date
        ref = Epiweek.from_int(CANARY_DATE)
        poisoned = tmp_path / "poisoned"
        poisoned.mkdir()
        shutil.copy(mini_dir / "config.toml", poisoned)
        for name in ("nhsn", "flusurv", "ili", "positivity"):
            frame = pd.read_csv(mini_dir / f"{name}.csv")
            future = frame["epiweek"] >= ref.to_int()
            assert future.any() or name != "nhsn"
            if name == "positivity":
                frame.loc[future, "value"] = 0.999
            else:
                frame.loc[future, "value"] = frame.loc[future, "value"] * 1000 + 5000
            frame.to_csv(poisoned / f"{name}.csv", index=False)
        assert main(["forecast", "--config", str(poisoned / "config.toml"), "--date", str(CANARY_DATE),
                     "--out", str(poisoned / "out")]) == 0
        for model in GROUPS["experiment_a"]:
            name = Path("forecasts") / model / f"{ref.end_date.isoformat()}-{model}.csv"
            assert (poisoned / "out" / name).read_bytes() == (root / "out" / name).read_bytes(), model
        notes.append(f"canary at {CANARY_DATE} identical for {len(GROUPS['experiment_a'])} models")


def test_11_tournament_sanity(criterion, mini_backtest):
    _, result, _ = mini_backtest
    table = result.scores.table
    with criterion(11, "rMWIS ranking equals MWIS ranking, baseline rMWIS = 1") as notes:
        assert (table["% Submitted"] == 100).all()
        counts = result.scores.per_task.groupby("model").size()
        assert counts.nunique() == 1
        t = table.set_index("model_id")
        assert t.loc["baseline_flat", "rMWIS"] == 1.0
        by_mwis = list(t["MWIS"].sort_values(kind="stable").index)
        by_rel = list(t["rMWIS"].sort_values(kind="stable").index)
        notes.append(" < ".join(by_rel))
        assert by_mwis == by_rel
        assert not math.isnan(t["rMAE"].sum())
