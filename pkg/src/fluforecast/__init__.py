"""Probabilistic forecasting of weekly influenza hospital admissions.

Subpackages and modules:

* ``core``: MMWR calendar, quantile levels, tasks and the location registry
* ``ingest``: surveillance loaders, reporting adjustments, training filters
* ``transform``: per-series standardization and its inverse
* ``features``: windowed feature rows and targets
* ``gbqr``: gradient boosted quantile regression with season bagging
* ``arx``: Bayesian autoregressive model with a holiday covariate
* ``baselines``: Baseline-flat and Baseline-trend
* ``ensemble``: quantile averaging
* ``score``: WIS, MAE, coverage and pairwise relative skill
* ``pipeline`` and ``cli``: backtesting and the command-line interface
"""
__version__ = "0.1.0"
