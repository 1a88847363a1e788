"""Honest regression forest exposing its smoother weights.

Every tree draws a subsample without replacement and splits it into a
structure half, which chooses the splits, and an estimation half, which
populates the leaves. A prediction is therefore a weighted average of
estimation-half outcomes,

    predict(x) = sum_i alpha_i(x) * y_i,
    alpha_i(x) = (1/B) sum_b 1[i in L_b(x)] / |L_b(x)|,

and the weights ``alpha_i(x)`` can be read off directly (:meth:`weights_at`),
which is what the normalised DR-learner needs.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "ConstantSmoother",
    "ForestParams",
    "HonestForestRegressor",
    "SmootherWeights",
    "default_grid",
    "fit",
    "predict",
    "tune",
    "weights_at",
]

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 500
    mtry: int | None = None
    min_leaf: int = 5
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0 < self.honesty_fraction < 1:
            raise ValueError("honesty_fraction must lie in (0, 1)")

    def resolve_mtry(self, p: int) -> int:
        mtry = self.mtry if self.mtry is not None else math.ceil(math.sqrt(p))
        if mtry > p:
            raise ValueError(f"mtry={mtry} exceeds the number of features {p}")
        return mtry

    def with_seed(self, seed: int) -> "ForestParams":
        return replace(self, seed=int(seed))

    def estimator(self, n_jobs=None) -> "HonestForestRegressor":
        return HonestForestRegressor(n_jobs=n_jobs, **self.__dict__)


PROPENSITY_PARAMS = ForestParams(min_leaf=10)


def default_grid(p: int, base: ForestParams | None = None) -> list[ForestParams]:
    """mtry in {ceil(sqrt p), ceil(p/3)} crossed with min_leaf in {5, 20}."""
    base = base or ForestParams()
    mtrys = [math.ceil(math.sqrt(p)), max(1, math.ceil(p / 3))]
    return [replace(base, mtry=m, min_leaf=leaf) for m in mtrys for leaf in (5, 20)]


@dataclass(frozen=True, eq=False)
class SmootherWeights:
    """Sparse weight vector over training rows at one prediction point."""

    indices: np.ndarray
    weights: np.ndarray

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.indices] = self.weights
        return out


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _grow_tree(Xt, y, order, in_struct, m_total, keys, mtry, min_leaf,
               feature, threshold, left, right, parent):
    """Grow one tree on ``rows`` (structure half). Returns the node count.

    Splits maximise variance reduction over ``mtry`` features drawn per node
    from ``keys``; candidates are midpoints between consecutive distinct
    values; ties go to the lower feature index, then the smaller threshold.
    ``Xt`` is the transposed design and ``order[f]`` the forest-wide sort
    order of feature ``f``; filtering it by ``in_struct`` presorts the
    structure rows, and each split is then one stable partition per feature.
    """
    max_nodes = feature.shape[0]
    p = Xt.shape[0]
    start = np.zeros(max_nodes, np.int64)
    stop = np.zeros(max_nodes, np.int64)
    stop[0] = m_total
    parent[0] = -1
    n_nodes = 1
    stack = np.empty(max_nodes, np.int64)
    stack[0] = 0
    top = 1
    srt = np.empty((p, m_total), np.int64)
    for f in range(p):
        k = 0
        for r in order[f]:
            if in_struct[r]:
                srt[f, k] = r
                k += 1
    goes_left = np.zeros(Xt.shape[1], np.bool_)
    buf = np.empty(m_total, np.int64)
    while top > 0:
        top -= 1
        node = stack[top]
        feature[node] = -1
        left[node] = -1
        right[node] = -1
        threshold[node] = 0.0
        s = start[node]
        e = stop[node]
        m = e - s
        if m < 2 * min_leaf or n_nodes + 2 > max_nodes:
            continue
        total = 0.0
        for k in range(s, e):
            total += y[srt[0, k]]
        mean = total / m
        ss = 0.0
        sq = 0.0
        for k in range(s, e):
            v = y[srt[0, k]]
            ss += (v - mean) * (v - mean)
            sq += v * v
        if ss == 0.0 or ss <= 1e-12 * sq:
            continue
        chosen = np.sort(np.argsort(keys[node])[:mtry])
        base = total * total / m
        best_gain = -1.0
        best_feat = -1
        best_thr = 0.0
        for f in chosen:
            sum_left = 0.0
            for i in range(m - 1):
                r = srt[f, s + i]
                sum_left += y[r]
                n_left = i + 1
                if n_left < min_leaf:
                    continue
                if m - n_left < min_leaf:
                    break
                a = Xt[f, r]
                b = Xt[f, srt[f, s + i + 1]]
                if a == b:
                    continue
                sum_right = total - sum_left
                gain = sum_left * sum_left / n_left + sum_right * sum_right / (m - n_left) - base
                if gain > best_gain:
                    best_gain = gain
                    best_feat = f
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr
        if best_feat < 0 or best_gain <= 1e-12 * ss:
            continue
        n_left = 0
        for k in range(s, e):
            r = srt[best_feat, k]
            flag = Xt[best_feat, r] <= best_thr
            goes_left[r] = flag
            if flag:
                n_left += 1
        for f in range(p):
            li = 0
            ri = n_left
            for k in range(s, e):
                r = srt[f, k]
                if goes_left[r]:
                    buf[li] = r
                    li += 1
                else:
                    buf[ri] = r
                    ri += 1
            for k in range(m):
                srt[f, s + k] = buf[k]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        parent[lc] = node
        parent[rc] = node
        start[lc] = s
        stop[lc] = s + n_left
        start[rc] = s + n_left
        stop[rc] = e
        stack[top] = rc
        stack[top + 1] = lc
        top += 2
    return n_nodes


@numba.njit(cache=True, nogil=True)
def _find_leaf(x, feature, threshold, left, right, offset):
    node = 0
    while feature[offset + node] >= 0:
        if x[feature[offset + node]] <= threshold[offset + node]:
            node = left[offset + node]
        else:
            node = right[offset + node]
    return node


@numba.njit(cache=True, nogil=True)
def _populate(X, y, est_rows, feature, threshold, left, right, parent, n_nodes):
    """Honest leaf population. Empty leaves resolve to their nearest
    ancestor holding estimation rows. Returns (target, member_ptr, members,
    value) where ``value`` is indexed by node."""
    counts = np.zeros(n_nodes, np.int64)
    leaf_of = np.empty(est_rows.shape[0], np.int64)
    for k in range(est_rows.shape[0]):
        node = _find_leaf(X[est_rows[k]], feature, threshold, left, right, 0)
        leaf_of[k] = node
        while node >= 0:
            counts[node] += 1
            node = parent[node]
    target = np.full(n_nodes, -1, np.int64)
    is_target = np.zeros(n_nodes, np.bool_)
    for node in range(n_nodes):
        if feature[node] < 0:
            t = node
            while counts[t] == 0:
                t = parent[t]
            target[node] = t
            is_target[t] = True
    ptr = np.zeros(n_nodes + 1, np.int64)
    for k in range(est_rows.shape[0]):
        node = leaf_of[k]
        while node >= 0:
            if is_target[node]:
                ptr[node + 1] += 1
            node = parent[node]
    for node in range(n_nodes):
        ptr[node + 1] += ptr[node]
    members = np.empty(ptr[n_nodes], np.int64)
    fill = ptr[:-1].copy()
    for k in range(est_rows.shape[0]):
        node = leaf_of[k]
        while node >= 0:
            if is_target[node]:
                members[fill[node]] = est_rows[k]
                fill[node] += 1
            node = parent[node]
    value = np.zeros(n_nodes)
    for node in range(n_nodes):
        if is_target[node]:
            acc = 0.0
            for k in range(ptr[node], ptr[node + 1]):
                acc += y[members[k]]
            value[node] = acc / (ptr[node + 1] - ptr[node])
    return target, ptr, members, value


@numba.njit(cache=True, nogil=True)
def _predict(Xq, feature, threshold, left, right, target, value, node_off):
    n_trees = node_off.shape[0] - 1
    out = np.zeros(Xq.shape[0])
    for b in range(n_trees):
        off = node_off[b]
        for q in range(Xq.shape[0]):
            leaf = _find_leaf(Xq[q], feature, threshold, left, right, off)
            out[q] += value[off + target[off + leaf]]
    return out / n_trees


@numba.njit(cache=True, nogil=True)
def _weighted_sums(Xq, V, feature, threshold, left, right, target, ptr, members, node_off, ptr_off):
    n_trees = node_off.shape[0] - 1
    out = np.zeros((Xq.shape[0], V.shape[1]))
    for b in range(n_trees):
        off = node_off[b]
        for q in range(Xq.shape[0]):
            t = target[off + _find_leaf(Xq[q], feature, threshold, left, right, off)]
            lo = ptr[ptr_off[b] + t]
            hi = ptr[ptr_off[b] + t + 1]
            inv = 1.0 / (hi - lo)
            for k in range(lo, hi):
                i = members[k]
                for c in range(V.shape[1]):
                    out[q, c] += V[i, c] * inv
    return out / n_trees


@numba.njit(cache=True, nogil=True)
def _weight_rows(Xq, n_train, feature, threshold, left, right, target, ptr, members, node_off, ptr_off):
    n_trees = node_off.shape[0] - 1
    out = np.zeros((Xq.shape[0], n_train))
    for b in range(n_trees):
        off = node_off[b]
        for q in range(Xq.shape[0]):
            t = target[off + _find_leaf(Xq[q], feature, threshold, left, right, off)]
            lo = ptr[ptr_off[b] + t]
            hi = ptr[ptr_off[b] + t + 1]
            inv = 1.0 / ((hi - lo) * n_trees)
            for k in range(lo, hi):
                out[q, members[k]] += inv
    return out


@numba.njit(cache=True, nogil=True)
def _oob(X, in_bag, feature, threshold, left, right, target, value, node_off):
    n = X.shape[0]
    total = np.zeros(n)
    count = np.zeros(n, np.int64)
    for b in range(node_off.shape[0] - 1):
        off = node_off[b]
        for i in range(n):
            if not in_bag[b, i]:
                leaf = _find_leaf(X[i], feature, threshold, left, right, off)
                total[i] += value[off + target[off + leaf]]
                count[i] += 1
    return total, count


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------


def _tree_seed(seed: int, b: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(b)])


class HonestForestRegressor(RegressorMixin, BaseEstimator):
    """Honest random forest regressor with extractable smoother weights.

    Parameters
    ----------
    num_trees : int
        Number of trees ``B``.
    mtry : int or None
        Features tried per split; ``None`` means ``ceil(sqrt(p))``.
    min_leaf : int
        Minimum number of structure-half rows on each side of a split.
    subsample_fraction : float
        Share of rows drawn (without replacement) for each tree.
    honesty_fraction : float
        Share of the subsample used to choose splits; the rest populates
        the leaves.
    seed : int
        Tree ``b`` draws from ``SeedSequence([seed, b])``, so fits are
        bit-identical for any ``n_jobs``.
    n_jobs : int or None
        Threads used for growing trees.
    """

    def __init__(self, num_trees=500, mtry=None, min_leaf=5, subsample_fraction=0.5,
                 honesty_fraction=0.5, seed=0, n_jobs=None):
        self.num_trees = num_trees
        self.mtry = mtry
        self.min_leaf = min_leaf
        self.subsample_fraction = subsample_fraction
        self.honesty_fraction = honesty_fraction
        self.seed = seed
        self.n_jobs = n_jobs

    @property
    def params(self) -> ForestParams:
        return ForestParams(self.num_trees, self.mtry, self.min_leaf,
                            self.subsample_fraction, self.honesty_fraction, self.seed)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        X = np.ascontiguousarray(X)
        y = np.ascontiguousarray(y, dtype=np.float64)
        params = self.params
        n, p = X.shape
        mtry = params.resolve_mtry(p)
        n_sub = max(1, int(round(params.subsample_fraction * n)))
        n_struct = int(math.floor(params.honesty_fraction * n_sub))
        if n_struct < 1 or n_sub - n_struct < 1:
            raise ValueError(
                f"{n} rows are too few for honest trees with subsample_fraction="
                f"{params.subsample_fraction} and honesty_fraction={params.honesty_fraction}"
            )
        max_nodes = 2 * (n_struct // params.min_leaf) + 1
        Xt = np.ascontiguousarray(X.T)
        order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)

        def grow(b):
            rng = np.random.default_rng(_tree_seed(params.seed, b))
            sub = rng.permutation(n)[:n_sub]
            struct = np.sort(sub[:n_struct])
            est = np.sort(sub[n_struct:])
            keys = rng.random((max_nodes, p))
            in_struct = np.zeros(n, dtype=np.bool_)
            in_struct[struct] = True
            feature = np.empty(max_nodes, np.int64)
            threshold = np.empty(max_nodes)
            left = np.empty(max_nodes, np.int64)
            right = np.empty(max_nodes, np.int64)
            parent = np.empty(max_nodes, np.int64)
            k = _grow_tree(Xt, y, order, in_struct, n_struct, keys, mtry, params.min_leaf,
                           feature, threshold, left, right, parent)
            feature, threshold, left, right, parent = (
                a[:k] for a in (feature, threshold, left, right, parent))
            target, ptr, members, value = _populate(
                X, y, est, feature, threshold, left, right, parent, k)
            return feature, threshold, left, right, target, ptr, members, value, sub

        workers = self.n_jobs or 1
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                trees = list(pool.map(grow, range(params.num_trees)))
        else:
            trees = [grow(b) for b in range(params.num_trees)]
        self._store(trees, n)
        in_bag = np.zeros((params.num_trees, n), dtype=np.bool_)
        for b, tree in enumerate(trees):
            in_bag[b, tree[8]] = True
        self.X_train_ = X
        self.y_train_ = y
        self.n_features_in_ = p
        total, count = _oob(X, in_bag, self.feature_, self.threshold_, self.left_,
                            self.right_, self.target_, self.value_, self.node_offset_)
        has = count > 0
        self.oob_prediction_ = np.where(has, total / np.maximum(count, 1), np.nan)
        self.oob_mse_ = float(np.mean((y[has] - self.oob_prediction_[has]) ** 2)) if has.any() else np.inf
        return self

    def _store(self, trees, n):
        sizes = np.array([t[0].shape[0] for t in trees])
        self.node_offset_ = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.ptr_offset_ = self.node_offset_ + np.arange(len(trees) + 1)
        member_sizes = np.array([t[6].shape[0] for t in trees])
        member_off = np.concatenate([[0], np.cumsum(member_sizes)]).astype(np.int64)
        self.feature_ = np.concatenate([t[0] for t in trees])
        self.threshold_ = np.concatenate([t[1] for t in trees])
        self.left_ = np.concatenate([t[2] for t in trees])
        self.right_ = np.concatenate([t[3] for t in trees])
        self.target_ = np.concatenate([t[4] for t in trees])
        self.member_ptr_ = np.concatenate([t[5] + member_off[b] for b, t in enumerate(trees)])
        self.members_ = np.concatenate([t[6] for t in trees])
        self.value_ = np.concatenate([t[7] for t in trees])

    def _check_X(self, X):
        check_is_fitted(self, "feature_")
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, forest was fitted with {self.n_features_in_}"
            )
        return np.ascontiguousarray(X)

    def predict(self, X):
        """Average over trees of the estimation-leaf means at ``X``."""
        X = self._check_X(X)
        return _predict(X, self.feature_, self.threshold_, self.left_, self.right_,
                        self.target_, self.value_, self.node_offset_)

    def weighted_sum(self, X, V):
        """``alpha(X) @ V`` without forming the weight matrix.

        ``V`` is indexed by training row (``n_train`` or ``n_train x c``).
        """
        X = self._check_X(X)
        V = np.asarray(V, dtype=np.float64)
        vector = V.ndim == 1
        V = np.ascontiguousarray(V.reshape(V.shape[0], -1))
        if V.shape[0] != self.y_train_.shape[0]:
            raise ValueError("V must have one row per training observation")
        out = _weighted_sums(X, V, self.feature_, self.threshold_, self.left_, self.right_,
                             self.target_, self.member_ptr_, self.members_,
                             self.node_offset_, self.ptr_offset_)
        return out[:, 0] if vector else out

    def weight_matrix(self, X):
        """Dense ``n_query x n_train`` matrix of ``alpha_i(x)``."""
        X = self._check_X(X)
        return _weight_rows(X, self.y_train_.shape[0], self.feature_, self.threshold_,
                            self.left_, self.right_, self.target_, self.member_ptr_,
                            self.members_, self.node_offset_, self.ptr_offset_)

    def weights_at(self, x) -> SmootherWeights:
        row = self.weight_matrix(np.asarray(x, dtype=float).reshape(1, -1))[0]
        idx = np.flatnonzero(row)
        return SmootherWeights(idx, row[idx])

    def tree_members(self, b: int, x) -> np.ndarray:
        """Estimation rows of tree ``b``'s leaf at the point ``x``."""
        X = self._check_X(x)
        off = self.node_offset_[b]
        leaf = _find_leaf(X[0], self.feature_, self.threshold_, self.left_, self.right_, off)
        t = self.target_[off + leaf]
        lo, hi = self.member_ptr_[self.ptr_offset_[b] + t], self.member_ptr_[self.ptr_offset_[b] + t + 1]
        return self.members_[lo:hi]

    # serialisation --------------------------------------------------------

    _ARRAYS = ("node_offset_", "ptr_offset_", "feature_", "threshold_", "left_", "right_",
               "target_", "member_ptr_", "members_", "value_", "X_train_", "y_train_",
               "oob_prediction_")

    def to_json(self) -> str:
        check_is_fitted(self, "feature_")
        blob = {
            "format": "dmleval.HonestForestRegressor",
            "version": _FORMAT_VERSION,
            "params": self.get_params(),
            "oob_mse": self.oob_mse_,
            "arrays": {
                k: {"dtype": str(getattr(self, k).dtype), "shape": list(getattr(self, k).shape),
                    "data": np.where(np.isnan(getattr(self, k)), None, getattr(self, k)).ravel().tolist()
                    if getattr(self, k).dtype.kind == "f" else getattr(self, k).ravel().tolist()}
                for k in self._ARRAYS
            },
        }
        return json.dumps(blob)

    @classmethod
    def from_json(cls, text: str) -> "HonestForestRegressor":
        blob = json.loads(text)
        if blob.get("format") != "dmleval.HonestForestRegressor":
            raise ValueError("not a serialised HonestForestRegressor")
        if blob.get("version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported format version {blob.get('version')}")
        model = cls(**blob["params"])
        for k, spec in blob["arrays"].items():
            data = [np.nan if v is None else v for v in spec["data"]]
            setattr(model, k, np.array(data, dtype=spec["dtype"]).reshape(spec["shape"]))
        model.oob_mse_ = blob["oob_mse"]
        model.n_features_in_ = model.X_train_.shape[1]
        return model


class ConstantSmoother(RegressorMixin, BaseEstimator):
    """Single-leaf smoother: ``alpha_i(x) = 1/n`` for every training row."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.y_train_ = y
        return self

    def _n_query(self, X):
        check_is_fitted(self, "y_train_")
        X = np.asarray(X, dtype=float)
        return 1 if X.ndim == 1 else X.shape[0]

    def predict(self, X):
        return np.full(self._n_query(X), self.y_train_.mean())

    def weighted_sum(self, X, V):
        V = np.asarray(V, dtype=float)
        mean = V.mean(axis=0)
        return np.broadcast_to(mean, (self._n_query(X),) + mean.shape).copy()

    def weight_matrix(self, X):
        n = self.y_train_.shape[0]
        return np.full((self._n_query(X), n), 1.0 / n)

    def weights_at(self, x) -> SmootherWeights:
        n = self.y_train_.shape[0]
        return SmootherWeights(np.arange(n), np.full(n, 1.0 / n))


# --------------------------------------------------------------------------
# functional interface
# --------------------------------------------------------------------------


def fit(x, y, params: ForestParams | None = None, n_jobs=None) -> HonestForestRegressor:
    return (params or ForestParams()).estimator(n_jobs=n_jobs).fit(x, y)


def predict(model, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def weights_at(model, x) -> SmootherWeights:
    return model.weights_at(x)


def tune(x, y, grid: Sequence[ForestParams], n_jobs=None) -> ForestParams:
    """Grid element with the smallest out-of-bag MSE (first one on ties)."""
    if not grid:
        raise ValueError("empty tuning grid")
    best, best_mse = None, np.inf
    for params in grid:
        mse = fit(x, y, params, n_jobs=n_jobs).oob_mse_
        if best is None or mse < best_mse:
            best, best_mse = params, mse
    return best
