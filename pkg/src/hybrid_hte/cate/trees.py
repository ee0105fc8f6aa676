"""Compiled kernels for honest regression and causal trees.

Covariates enter as dense ranks (see :class:`RankMap`), so split thresholds
are midpoints between consecutive distinct ranks and fitted forests are
invariant to strictly monotone recoding of any covariate.

Each tree reseeds the compiled generator from its own seed at the start of
its loop iteration, which makes results independent of the thread count.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is often too old; prefer layers that never probe it
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

LEAF = -1


class RankMap:
    """Map raw covariate values to dense ranks of a reference matrix.

    Values present in the reference map to their 0-based dense rank; values
    between two reference values map to the midpoint between their ranks.
    """

    def __init__(self, reference: np.ndarray):
        reference = np.asarray(reference, dtype=float)
        self.grids = [np.unique(reference[:, j]) for j in range(reference.shape[1])]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for j, grid in enumerate(self.grids):
            pos = np.searchsorted(grid, x[:, j], side="left")
            hit = (pos < grid.size) & (grid[np.minimum(pos, grid.size - 1)] == x[:, j])
            out[:, j] = np.where(hit, pos, pos - 0.5)
        return np.ascontiguousarray(out)


@njit(cache=True)
def _pick_features(p, mtry):
    perm = np.arange(p)
    for i in range(mtry):
        j = i + np.random.randint(p - i)
        t = perm[i]
        perm[i] = perm[j]
        perm[j] = t
    return np.sort(perm[:mtry])


@njit(cache=True)
def _grow(x, y, w, rows, mtry, min_leaf, causal, feat, thr, left, right, parent):
    """Grow one tree on ``rows``; returns the node count.

    Causal trees maximise ``sum_c n_c * tau_c**2`` over the two children
    (the between-children variance of difference-in-means contrasts) with
    at least ``min_leaf`` treated and control subjects per child. Regression
    trees maximise ``sum_c n_c * mean_c**2`` with ``min_leaf`` per child.
    """
    p = x.shape[1]
    buf = rows.copy()
    tmp = np.empty_like(buf)
    stack = np.empty((2 * rows.size + 2, 3), dtype=np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = buf.size
    sp = 1
    n_nodes = 1
    feat[0] = LEAF
    parent[0] = -1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        lo = stack[sp, 1]
        hi = stack[sp, 2]
        m = hi - lo
        feat[node] = LEAF
        # node totals
        tn1 = 0.0
        ts1 = 0.0
        ts = 0.0
        for ii in range(lo, hi):
            i = buf[ii]
            ts += y[i]
            if w[i] == 1:
                tn1 += 1.0
                ts1 += y[i]
        tn0 = m - tn1
        ts0 = ts - ts1
        if causal:
            if tn1 < 2 * min_leaf or tn0 < 2 * min_leaf:
                continue
            tau_p = ts1 / tn1 - ts0 / tn0
            base = m * tau_p * tau_p
        else:
            if m < 2 * min_leaf:
                continue
            base = ts * ts / m
        best_gain = 1e-12
        best_f = -1
        best_t = 0.0
        feats = _pick_features(p, mtry)
        vals = np.empty(m)
        for fi in range(feats.size):
            f = feats[fi]
            for ii in range(m):
                vals[ii] = x[buf[lo + ii], f]
            order = np.argsort(vals, kind="mergesort")
            ln1 = 0.0
            ls1 = 0.0
            ls = 0.0
            for k in range(m - 1):
                i = buf[lo + order[k]]
                ls += y[i]
                if w[i] == 1:
                    ln1 += 1.0
                    ls1 += y[i]
                v = vals[order[k]]
                vn = vals[order[k + 1]]
                if v == vn:
                    continue
                nl = k + 1.0
                nr = m - nl
                if causal:
                    ln0 = nl - ln1
                    rn1 = tn1 - ln1
                    rn0 = nr - ln0
                    if ln1 < min_leaf or ln0 < min_leaf or rn1 < min_leaf or rn0 < min_leaf:
                        continue
                    ls0 = ls - ls1
                    tl = ls1 / ln1 - ls0 / ln0
                    tr = (ts1 - ls1) / rn1 - (ts0 - ls0) / rn0
                    gain = nl * tl * tl + nr * tr * tr - base
                else:
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    rs = ts - ls
                    gain = ls * ls / nl + rs * rs / nr - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_t = 0.5 * (v + vn)
        if best_f < 0:
            continue
        # stable partition of buf[lo:hi]
        nl_i = 0
        for ii in range(lo, hi):
            if x[buf[ii], best_f] <= best_t:
                tmp[nl_i] = buf[ii]
                nl_i += 1
        nr_i = nl_i
        for ii in range(lo, hi):
            if x[buf[ii], best_f] > best_t:
                tmp[nr_i] = buf[ii]
                nr_i += 1
        for ii in range(m):
            buf[lo + ii] = tmp[ii]
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_t
        left[node] = lnode
        right[node] = rnode
        parent[lnode] = node
        parent[rnode] = node
        feat[lnode] = LEAF
        feat[rnode] = LEAF
        # push right first so the left subtree is numbered first
        stack[sp, 0] = rnode
        stack[sp, 1] = lo + nl_i
        stack[sp, 2] = hi
        sp += 1
        stack[sp, 0] = lnode
        stack[sp, 1] = lo
        stack[sp, 2] = lo + nl_i
        sp += 1
    return n_nodes


@njit(cache=True)
def _leaf_of(x, i, feat, thr, left, right):
    node = 0
    while feat[node] != LEAF:
        if x[i, feat[node]] <= thr[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True)
def _honest_values(x, y, w, rows, n_nodes, feat, thr, left, right, parent, causal, fallback, value):
    """Leaf values re-estimated on ``rows`` (the estimation half).

    A node whose estimation sample lacks a needed arm (or is empty)
    inherits its parent's value; the root falls back to ``fallback``.
    """
    n1 = np.zeros(n_nodes)
    s1 = np.zeros(n_nodes)
    n0 = np.zeros(n_nodes)
    s0 = np.zeros(n_nodes)
    for r in range(rows.size):
        i = rows[r]
        node = 0
        while True:
            if w[i] == 1:
                n1[node] += 1.0
                s1[node] += y[i]
            else:
                n0[node] += 1.0
                s0[node] += y[i]
            if feat[node] == LEAF:
                break
            if x[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
    for node in range(n_nodes):
        inherited = fallback if node == 0 else value[parent[node]]
        if causal:
            if n1[node] > 0 and n0[node] > 0:
                value[node] = s1[node] / n1[node] - s0[node] / n0[node]
            else:
                value[node] = inherited
        else:
            tot = n1[node] + n0[node]
            if tot > 0:
                value[node] = (s1[node] + s0[node]) / tot
            else:
                value[node] = inherited


@njit(cache=True)
def _arm_contrast(y, w, rows):
    n1 = 0.0
    s1 = 0.0
    n0 = 0.0
    s0 = 0.0
    for r in range(rows.size):
        i = rows[r]
        if w[i] == 1:
            n1 += 1.0
            s1 += y[i]
        else:
            n0 += 1.0
            s0 += y[i]
    t = 0.0
    if n1 > 0 and n0 > 0:
        t = s1 / n1 - s0 / n0
    return t, (s1 + s0) / max(n1 + n0, 1.0)


@njit(parallel=True, cache=True)
def grow_forest(x, y, w, train, seeds, sub_n, grow_n, mtry, min_leaf, causal):
    """Grow ``seeds.size`` honest trees on rows ``train``.

    Returns node arrays of shape (n_trees, max_nodes): split feature
    (``LEAF`` for leaves), threshold, left child, right child, value.
    """
    n_trees = seeds.size
    max_nodes = 2 * grow_n + 1
    feat = np.full((n_trees, max_nodes), LEAF, dtype=np.int64)
    thr = np.zeros((n_trees, max_nodes))
    left = np.zeros((n_trees, max_nodes), dtype=np.int64)
    right = np.zeros((n_trees, max_nodes), dtype=np.int64)
    value = np.zeros((n_trees, max_nodes))
    for b in prange(n_trees):
        np.random.seed(seeds[b])
        idx = train.copy()
        # partial Fisher-Yates: the first sub_n entries form the subsample
        for i in range(sub_n):
            j = i + np.random.randint(idx.size - i)
            t = idx[i]
            idx[i] = idx[j]
            idx[j] = t
        grow_rows = idx[:grow_n].copy()
        est_rows = idx[grow_n:sub_n].copy()
        parent = np.zeros(max_nodes, dtype=np.int64)
        nn = _grow(x, y, w, grow_rows, mtry, min_leaf, causal, feat[b], thr[b], left[b], right[b], parent)
        tau_g, mean_g = _arm_contrast(y, w, grow_rows)
        fallback = tau_g if causal else mean_g
        _honest_values(x, y, w, est_rows, nn, feat[b], thr[b], left[b], right[b], parent, causal, fallback, value[b])
    return feat, thr, left, right, value


@njit(parallel=True, cache=True)
def predict_forest(x, rows, feat, thr, left, right, value):
    out = np.zeros(rows.size)
    n_trees = feat.shape[0]
    for r in prange(rows.size):
        i = rows[r]
        acc = 0.0
        for b in range(n_trees):
            acc += value[b, _leaf_of(x, i, feat[b], thr[b], left[b], right[b])]
        out[r] = acc / n_trees
    return out
