"""Compiled kernels for histogram-based, leaf-wise quantile boosting.

Rows are pre-binned into ``uint8`` codes per feature; code 255 marks a
missing value. A split "after bin b" sends codes <= b left, codes > b right,
and missing codes to the side recorded in ``missing_left``.
"""
import math

import numpy as np
from numba import njit

MISSING_BIN = 255
N_SLOTS = 256


@njit(cache=True, nogil=True)
def _build_hist(binned, grad, rows, start, stop, hg, hn):
    n_feat = binned.shape[1]
    for f in range(n_feat):
        for b in range(N_SLOTS):
            hg[f, b] = 0.0
            hn[f, b] = 0.0
    for i in range(start, stop):
        r = rows[i]
        g = grad[r]
        for f in range(n_feat):
            b = binned[r, f]
            hg[f, b] += g
            hn[f, b] += 1.0


@njit(cache=True, nogil=True)
def _best_split(hg, hn, n_bins, G, N, min_leaf, min_gain):
    """Best (gain, feature, bin, missing_left) under the unit-hessian surrogate."""
    parent = G * G / N
    tol = 1e-12 * max(1.0, abs(parent))
    best_gain = min_gain + tol
    best_f = -1
    best_b = -1
    best_ml = True
    for f in range(hg.shape[0]):
        nb = n_bins[f]
        gm = hg[f, MISSING_BIN]
        nm = hn[f, MISSING_BIN]
        gl = 0.0
        nl = 0.0
        for b in range(nb - 1):
            gl += hg[f, b]
            nl += hn[f, b]
            # missing rows sent right (or, with no missing rows, irrelevant)
            nr = N - nl
            if nl >= min_leaf and nr >= min_leaf:
                gr = G - gl
                gain = gl * gl / nl + gr * gr / nr - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
                    best_ml = nm == 0.0
            if nm > 0.0:
                nl2 = nl + nm
                nr2 = N - nl2
                if nl2 >= min_leaf and nr2 >= min_leaf:
                    gl2 = gl + gm
                    gr2 = G - gl2
                    gain = gl2 * gl2 / nl2 + gr2 * gr2 / nr2 - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
                        best_ml = True
    return best_gain, best_f, best_b, best_ml


@njit(cache=True, nogil=True)
def _grow_tree(binned, n_bins, grad, rows, max_leaves, min_leaf, min_gain,
               hist_g, hist_n, buf,
               node_feature, node_bin, node_ml, node_left, node_right, node_leaf,
               leaf_start, leaf_stop):
    """Grow one tree leaf-wise; returns (n_nodes, n_leaves).

    ``rows`` is permuted in place so leaf k owns ``rows[leaf_start[k]:leaf_stop[k]]``.
    """
    n = rows.shape[0]
    leaf_node = np.empty(max_leaves, np.int64)
    leaf_slot = np.empty(max_leaves, np.int64)
    leaf_G = np.empty(max_leaves)
    leaf_N = np.empty(max_leaves)
    leaf_gain = np.empty(max_leaves)
    leaf_f = np.empty(max_leaves, np.int64)
    leaf_b = np.empty(max_leaves, np.int64)
    leaf_ml = np.empty(max_leaves, np.bool_)

    G = 0.0
    for i in range(n):
        G += grad[rows[i]]
    node_feature[0] = -1
    node_leaf[0] = 0
    leaf_node[0] = 0
    leaf_slot[0] = 0
    leaf_start[0] = 0
    leaf_stop[0] = n
    leaf_G[0] = G
    leaf_N[0] = n
    _build_hist(binned, grad, rows, 0, n, hist_g[0], hist_n[0])
    gain, f, b, ml = _best_split(hist_g[0], hist_n[0], n_bins, G, float(n), min_leaf, min_gain)
    leaf_gain[0] = gain
    leaf_f[0] = f
    leaf_b[0] = b
    leaf_ml[0] = ml
    n_leaves = 1
    n_nodes = 1

    while n_leaves < max_leaves:
        best = -1
        best_gain = -np.inf
        for l in range(n_leaves):
            if leaf_f[l] >= 0 and leaf_gain[l] > best_gain:
                best_gain = leaf_gain[l]
                best = l
        if best < 0:
            break
        l = best
        f = leaf_f[l]
        b = leaf_b[l]
        ml = leaf_ml[l]
        start = leaf_start[l]
        stop = leaf_stop[l]

        # stable partition of rows[start:stop]
        nl = 0
        nr = 0
        GL = 0.0
        for i in range(start, stop):
            r = rows[i]
            code = binned[r, f]
            go_left = (code == MISSING_BIN and ml) or (code != MISSING_BIN and code <= b)
            if go_left:
                rows[start + nl] = r
                nl += 1
                GL += grad[r]
            else:
                buf[nr] = r
                nr += 1
        for i in range(nr):
            rows[start + nl + i] = buf[i]
        GR = leaf_G[l] - GL

        node = leaf_node[l]
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_feature[node] = f
        node_bin[node] = b
        node_ml[node] = ml
        node_left[node] = left
        node_right[node] = right
        node_leaf[node] = -1
        node_feature[left] = -1
        node_feature[right] = -1

        r_leaf = n_leaves
        n_leaves += 1
        node_leaf[left] = l
        node_leaf[right] = r_leaf
        leaf_node[l] = left
        leaf_node[r_leaf] = right
        leaf_start[l] = start
        leaf_stop[l] = start + nl
        leaf_start[r_leaf] = start + nl
        leaf_stop[r_leaf] = stop
        leaf_G[l] = GL
        leaf_N[l] = nl
        leaf_G[r_leaf] = GR
        leaf_N[r_leaf] = nr

        parent_slot = leaf_slot[l]
        new_slot = r_leaf
        if nl <= nr:
            _build_hist(binned, grad, rows, start, start + nl, hist_g[new_slot], hist_n[new_slot])
            leaf_slot[l] = new_slot
            leaf_slot[r_leaf] = parent_slot
        else:
            _build_hist(binned, grad, rows, start + nl, stop, hist_g[new_slot], hist_n[new_slot])
            leaf_slot[l] = parent_slot
            leaf_slot[r_leaf] = new_slot
        hist_g[parent_slot] -= hist_g[new_slot]
        hist_n[parent_slot] -= hist_n[new_slot]

        for leaf in (l, r_leaf):
            s = leaf_slot[leaf]
            gain, f2, b2, ml2 = _best_split(hist_g[s], hist_n[s], n_bins, leaf_G[leaf],
                                            leaf_N[leaf], min_leaf, min_gain)
            leaf_gain[leaf] = gain
            leaf_f[leaf] = f2
            leaf_b[leaf] = b2
            leaf_ml[leaf] = ml2
    return n_nodes, n_leaves


@njit(cache=True, nogil=True)
def central_quantile(values, alpha):
    """Midpoint of the set of empirical alpha-quantiles (pinball-loss minimizers).

    The minimizer is the order statistic ``s[ceil(alpha*n)]`` unless ``alpha*n``
    is an integer k, in which case every point of ``[s[k], s[k+1]]`` minimizes
    and the midpoint is returned.
    """
    n = values.shape[0]
    s = np.sort(values)
    an = alpha * n
    k = int(math.floor(an + 0.5))
    if abs(an - k) < 1e-9 and 1 <= k < n:
        return 0.5 * (s[k - 1] + s[k])
    k = int(math.ceil(an - 1e-9))
    if k < 1:
        k = 1
    if k > n:
        k = n
    return s[k - 1]


@njit(cache=True, nogil=True)
def pinball_mean(y, F, alpha):
    total = 0.0
    for i in range(y.shape[0]):
        d = y[i] - F[i]
        if d >= 0:
            total += alpha * d
        else:
            total -= (1.0 - alpha) * d
    return total / y.shape[0]


@njit(cache=True, nogil=True)
def boost(binned, n_bins, y, alpha, num_rounds, learning_rate, max_leaves, min_leaf, min_gain):
    """Fit one quantile booster on pre-binned rows.

    Returns (base_score, n_trees, node arrays of shape (num_rounds, 2*max_leaves),
    node counts per tree, training loss trace of length n_trees + 1).
    Leaf values are the raw residual quantiles; predictions add
    ``learning_rate * value``.
    """
    n = y.shape[0]
    n_feat = binned.shape[1]
    max_nodes = 2 * max_leaves - 1
    base = central_quantile(y, alpha)
    F = np.full(n, base)
    grad = np.empty(n)
    rows = np.empty(n, np.int64)
    buf = np.empty(n, np.int64)
    hist_g = np.zeros((max_leaves, n_feat, N_SLOTS))
    hist_n = np.zeros((max_leaves, n_feat, N_SLOTS))
    leaf_start = np.empty(max_leaves, np.int64)
    leaf_stop = np.empty(max_leaves, np.int64)

    t_feature = np.full((num_rounds, max_nodes), -1, np.int64)
    t_bin = np.zeros((num_rounds, max_nodes), np.int64)
    t_ml = np.ones((num_rounds, max_nodes), np.bool_)
    t_left = np.full((num_rounds, max_nodes), -1, np.int64)
    t_right = np.full((num_rounds, max_nodes), -1, np.int64)
    t_value = np.zeros((num_rounds, max_nodes))
    t_nodes = np.zeros(num_rounds, np.int64)
    node_leaf = np.empty(max_nodes, np.int64)
    loss = np.empty(num_rounds + 1)
    loss[0] = pinball_mean(y, F, alpha)

    n_trees = 0
    for it in range(num_rounds):
        for i in range(n):
            grad[i] = alpha - 1.0 if y[i] < F[i] else alpha
            rows[i] = i
        n_nodes, n_leaves = _grow_tree(
            binned, n_bins, grad, rows, max_leaves, min_leaf, min_gain, hist_g, hist_n, buf,
            t_feature[it], t_bin[it], t_ml[it], t_left[it], t_right[it], node_leaf,
            leaf_start, leaf_stop)
        if n_leaves < 2:
            break
        for node in range(n_nodes):
            leaf = node_leaf[node]
            if t_feature[it, node] >= 0 or leaf < 0:
                continue
            s = leaf_start[leaf]
            e = leaf_stop[leaf]
            resid = np.empty(e - s)
            for i in range(s, e):
                resid[i - s] = y[rows[i]] - F[rows[i]]
            v = central_quantile(resid, alpha)
            t_value[it, node] = v
            step = learning_rate * v
            for i in range(s, e):
                F[rows[i]] += step
        t_nodes[it] = n_nodes
        n_trees += 1
        loss[n_trees] = pinball_mean(y, F, alpha)
    return base, n_trees, t_feature, t_bin, t_ml, t_left, t_right, t_value, t_nodes, loss[:n_trees + 1]


@njit(cache=True, nogil=True)
def predict_forest(X, base, learning_rate, feature, threshold, missing_left, left, right, value, n_trees):
    n = X.shape[0]
    out = np.full(n, base)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            node = 0
            while feature[t, node] >= 0:
                x = X[i, feature[t, node]]
                if math.isnan(x):
                    go_left = missing_left[t, node]
                else:
                    go_left = x <= threshold[t, node]
                node = left[t, node] if go_left else right[t, node]
            acc += value[t, node]
        out[i] += learning_rate * acc
    return out
