"""Gradient boosted quantile regression with season bagging."""
from .bagging import (BagEnsemble, bag_size, dumps_ensemble, feature_importance, fit_bagged, load_ensemble,
                      loads_ensemble, predict_tasks, sample_bag_seasons, save_ensemble)
from .booster import BoostedQuantileModel, GbqrHyperparams, RegressionTree, bin_matrix, fit_boosted_quantile
from .variants import GbqrVariant

__all__ = [
    "BagEnsemble", "BoostedQuantileModel", "bag_size", "GbqrHyperparams", "GbqrVariant", "RegressionTree",
    "bin_matrix", "dumps_ensemble", "feature_importance", "fit_bagged", "fit_boosted_quantile",
    "load_ensemble", "loads_ensemble", "predict_tasks", "sample_bag_seasons", "save_ensemble",
]
