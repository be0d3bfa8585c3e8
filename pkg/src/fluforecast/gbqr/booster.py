"""Gradient boosted regression trees for a single quantile level."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

MAX_BIN = 255


@dataclass(frozen=True)
class GbqrHyperparams:
    """Booster settings; defaults follow the usual library defaults for quantile GBMs."""

    num_rounds: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_leaf_count: int = 20
    min_split_gain: float = 0.0
    max_bin: int = MAX_BIN

    def __post_init__(self):
        if self.num_rounds < 1 or self.learning_rate <= 0 or self.max_leaves < 1 or self.min_leaf_count < 1:
            raise ValueError(f"hyperparameters must be positive: {self}")
        if self.min_split_gain < 0:
            raise ValueError("min_split_gain must be >= 0")
        if not 2 <= self.max_bin <= MAX_BIN:
            raise ValueError(f"max_bin must be in [2, {MAX_BIN}]")


@dataclass
class BinnedMatrix:
    """Per-feature bin codes for the splittable columns of a feature matrix.

    ``features[j]`` is the original column index of binned column ``j`` and
    ``thresholds[j][b]`` the real-valued split point after bin ``b``.
    """

    codes: np.ndarray
    features: np.ndarray
    thresholds: list
    n_bins: np.ndarray


def _thresholds(values: np.ndarray, max_bin: int) -> np.ndarray:
    uniq = np.unique(values)
    if uniq.size <= 1:
        return np.empty(0)
    if uniq.size <= max_bin:
        lo, hi = uniq[:-1], uniq[1:]
        mid = lo + (hi - lo) / 2
        return np.where(mid < hi, mid, lo)
    cand = np.quantile(values, np.linspace(0, 1, max_bin + 1)[1:-1])
    cand = np.unique(cand)
    return cand[cand < uniq[-1]]


def bin_matrix(X: np.ndarray, max_bin: int = MAX_BIN) -> BinnedMatrix:
    X = np.asarray(X, dtype=float)
    feats, thresholds, codes = [], [], []
    for j in range(X.shape[1]):
        col = X[:, j]
        present = ~np.isnan(col)
        thr = _thresholds(col[present], max_bin)
        if thr.size == 0:
            continue
        c = np.full(col.shape, K.MISSING_BIN, dtype=np.uint8)
        c[present] = np.searchsorted(thr, col[present], side="left")
        feats.append(j)
        thresholds.append(thr)
        codes.append(c)
    codes = np.ascontiguousarray(np.column_stack(codes)) if codes else np.zeros((X.shape[0], 0), np.uint8)
    n_bins = np.array([t.size + 1 for t in thresholds], dtype=np.int64)
    return BinnedMatrix(codes, np.array(feats, dtype=np.int64), thresholds, n_bins)


@dataclass
class RegressionTree:
    """Binary tree in preorder-compatible array form.

    Internal nodes have ``feature >= 0`` and route ``x <= threshold`` left;
    NaN goes left when ``missing_left``. Leaves carry ``value``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_internal(self) -> int:
        return int(np.sum(self.feature >= 0))

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return K.predict_forest(X, 0.0, 1.0, self.feature[None], self.threshold[None],
                                self.missing_left[None], self.left[None], self.right[None],
                                self.value[None], 1)

    def preorder(self) -> list:
        """Nodes as ``[feature, threshold, missing_left, value]`` in preorder."""
        out, stack = [], [0]
        while stack:
            i = stack.pop()
            if self.feature[i] >= 0:
                out.append([int(self.feature[i]), float(self.threshold[i]), bool(self.missing_left[i]), 0.0])
                stack.append(int(self.right[i]))
                stack.append(int(self.left[i]))
            else:
                out.append([-1, 0.0, True, float(self.value[i])])
        return out

    @classmethod
    def from_preorder(cls, nodes) -> "RegressionTree":
        n = len(nodes)
        feature = np.full(n, -1, np.int64)
        threshold = np.zeros(n)
        ml = np.ones(n, np.bool_)
        left = np.full(n, -1, np.int64)
        right = np.full(n, -1, np.int64)
        value = np.zeros(n)
        pos = 0

        def walk():
            nonlocal pos
            i = pos
            f, thr, m, v = nodes[i]
            pos += 1
            feature[i], threshold[i], ml[i], value[i] = f, thr, m, v
            if f >= 0:
                left[i] = walk()
                right[i] = walk()
            return i

        walk()
        return cls(feature, threshold, ml, left, right, value)


@dataclass
class BoostedQuantileModel:
    """``predict(x) = base_score + learning_rate * sum(tree(x))``."""

    level: float
    base_score: float
    learning_rate: float
    trees: list = field(default_factory=list)
    loss_trace: np.ndarray | None = None

    @property
    def _packed(self):
        cached = getattr(self, "_pack_cache", None)
        if cached is None:
            width = max([t.feature.size for t in self.trees] + [1])
            n = len(self.trees)
            arrays = [np.full((n, width), -1, np.int64), np.zeros((n, width)), np.ones((n, width), np.bool_),
                      np.full((n, width), -1, np.int64), np.full((n, width), -1, np.int64), np.zeros((n, width))]
            for i, t in enumerate(self.trees):
                k = t.feature.size
                for arr, src in zip(arrays, (t.feature, t.threshold, t.missing_left, t.left, t.right, t.value)):
                    arr[i, :k] = src
            cached = arrays
            object.__setattr__(self, "_pack_cache", cached)
        return cached

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        if not self.trees:
            return np.full(X.shape[0], self.base_score)
        return K.predict_forest(X, self.base_score, self.learning_rate, *self._packed, len(self.trees))

    def split_counts(self, n_features: int) -> np.ndarray:
        counts = np.zeros(n_features)
        for t in self.trees:
            f = t.feature[t.feature >= 0]
            np.add.at(counts, f, 1)
        return counts


def fit_binned(binned: BinnedMatrix, y: np.ndarray, level: float, hp: GbqrHyperparams) -> BoostedQuantileModel:
    """Boost on already-binned rows."""
    y = np.ascontiguousarray(y, dtype=float)
    if binned.codes.shape[1] == 0:
        return BoostedQuantileModel(level, float(K.central_quantile(y, level)), hp.learning_rate, [],
                                    np.array([K.pinball_mean(y, np.full(y.size, K.central_quantile(y, level)), level)]))
    (base, n_trees, feat, bins, ml, left, right, value, n_nodes, loss) = K.boost(
        binned.codes, binned.n_bins, y, float(level), hp.num_rounds, hp.learning_rate,
        hp.max_leaves, float(hp.min_leaf_count), hp.min_split_gain)
    trees = []
    for t in range(n_trees):
        k = n_nodes[t]
        f_local = feat[t, :k]
        internal = f_local >= 0
        f_orig = np.where(internal, binned.features[np.where(internal, f_local, 0)], -1)
        thr = np.zeros(k)
        for node in np.flatnonzero(internal):
            thr[node] = binned.thresholds[f_local[node]][bins[t, node]]
        trees.append(RegressionTree(f_orig.astype(np.int64), thr, ml[t, :k].copy(), left[t, :k].copy(),
                                    right[t, :k].copy(), value[t, :k].copy()))
    return BoostedQuantileModel(level, float(base), hp.learning_rate, trees, loss)


def fit_boosted_quantile(X: np.ndarray, y: np.ndarray, level: float, hp: GbqrHyperparams | None = None,
                         seed: int | None = None) -> BoostedQuantileModel:
    """Fit a quantile booster minimizing mean pinball loss at ``level``.

    The procedure is deterministic; ``seed`` is accepted for interface
    symmetry with the bagged fit and does not change the result.
    """
    hp = hp or GbqrHyperparams()
    y = np.asarray(y, dtype=float)
    if y.size == 0 or not np.all(np.isfinite(y)):
        raise ValueError("training targets must be nonempty and finite")
    if not 0 < level < 1:
        raise ValueError(f"quantile level must lie in (0, 1), got {level}")
    return fit_binned(bin_matrix(X, hp.max_bin), y, level, hp)
