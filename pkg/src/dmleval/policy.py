"""Policy values, exact depth-bounded policy trees and their cross-validation.

A policy tree of depth ``d`` is stored as a complete binary tree in
breadth-first order: ``2**d - 1`` internal nodes ``(feature, threshold)``
and ``2**d`` leaf arms. Rows go left iff ``z[feature] <= threshold``. A
node with threshold ``-inf`` sends every row right, which is how a subtree
that does not split is represented.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset, FoldAssignment
from .exceptions import ValidationError
from .scores import EffectEstimate, ScoreSet, mean_effect

__all__ = [
    "CvPolicyTest",
    "PolicyTree",
    "PolicyTreeModel",
    "PolicyValue",
    "cross_validate_policy",
    "evaluate_policy",
    "policy_agreement",
    "search_exact",
]

MAX_DEPTH = 3


def _encode_threshold(t: float):
    if math.isinf(t):
        return "inf" if t > 0 else "-inf"
    return float(t)


def _decode_threshold(t) -> float:
    return float(t)


@dataclass(frozen=True, eq=False)
class PolicyTreeModel:
    """Complete binary policy tree.

    Parameters
    ----------
    depth : int
    features : int array of length ``2**depth - 1``
    thresholds : float array of length ``2**depth - 1``
    leaves : int array of length ``2**depth``
    """

    depth: int
    features: np.ndarray
    thresholds: np.ndarray
    leaves: np.ndarray

    def __post_init__(self):
        if not 0 <= self.depth <= MAX_DEPTH:
            raise ValidationError(f"policy tree depth must be in 0..{MAX_DEPTH}")
        n_nodes = 2 ** self.depth - 1
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.int64).reshape(n_nodes))
        object.__setattr__(self, "thresholds", np.asarray(self.thresholds, dtype=float).reshape(n_nodes))
        object.__setattr__(self, "leaves", np.asarray(self.leaves, dtype=np.int64).reshape(n_nodes + 1))
        if np.any(self.features < 0):
            raise ValidationError("feature indices must be nonnegative")
        if np.any(self.leaves < 0):
            raise ValidationError("leaf arms must be nonnegative")
        if np.any(np.isnan(self.thresholds)):
            raise ValidationError("thresholds must not be NaN")

    @classmethod
    def leaf(cls, arm: int) -> "PolicyTreeModel":
        return cls(0, [], [], [arm])

    def leaf_index(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if self.features.size and self.features.max() >= z.shape[1]:
            raise ValidationError(
                f"tree uses feature {int(self.features.max())} but z has {z.shape[1]} columns"
            )
        k = np.zeros(z.shape[0], dtype=np.int64)
        rows = np.arange(z.shape[0])
        for _ in range(self.depth):
            go_left = z[rows, self.features[k]] <= self.thresholds[k]
            k = np.where(go_left, 2 * k + 1, 2 * k + 2)
        return k - (2 ** self.depth - 1)

    def predict(self, z) -> np.ndarray:
        return self.leaves[self.leaf_index(z)]

    def to_dict(self) -> dict:
        return {
            "depth": int(self.depth),
            "nodes": [{"feature": int(f), "threshold": _encode_threshold(float(t))}
                      for f, t in zip(self.features, self.thresholds)],
            "leaves": [int(a) for a in self.leaves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyTreeModel":
        nodes = d["nodes"]
        return cls(int(d["depth"]), [n["feature"] for n in nodes],
                   [_decode_threshold(n["threshold"]) for n in nodes], d["leaves"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PolicyTreeModel":
        return cls.from_dict(json.loads(text))

    def render(self, feature_names=None, labels=None) -> str:
        """Indented text form; subtrees that do not split are printed as leaves."""
        lines: list[str] = []

        def name(j):
            return feature_names[j] if feature_names is not None else f"z{j}"

        def arm(a):
            return f"arm {labels[a] if labels is not None else a}"

        def walk(k, level, indent):
            if level == self.depth:
                lines.append(indent + arm(self.leaves[k - (2 ** self.depth - 1)]))
                return
            t = self.thresholds[k]
            if t == -np.inf:
                walk(2 * k + 2, level + 1, indent)
                return
            if t == np.inf:
                walk(2 * k + 1, level + 1, indent)
                return
            lines.append(f"{indent}{name(self.features[k])} <= {t:.6g}")
            walk(2 * k + 1, level + 1, indent + "  ")
            lines.append(f"{indent}{name(self.features[k])} > {t:.6g}")
            walk(2 * k + 2, level + 1, indent + "  ")

        walk(0, 0, "")
        return "\n".join(lines)


@dataclass(frozen=True)
class PolicyValue:
    value: float
    se: float
    shares: np.ndarray
    estimate: EffectEstimate

    def to_dict(self, labels=None) -> dict:
        labels = labels if labels is not None else list(range(len(self.shares)))
        return {"value": self.value, "se": self.se,
                "shares": {str(l): float(s) for l, s in zip(labels, self.shares)}}


def _gamma(scores) -> np.ndarray:
    g = scores.gamma if isinstance(scores, ScoreSet) else scores
    g = np.asarray(g, dtype=float)
    if g.ndim != 2:
        raise ValidationError("scores must be an (n, arms) matrix")
    return g


def _z_matrix(z, n) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != n:
        raise ValidationError(f"z has {z.shape[0]} rows, scores have {n}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("z must be finite")
    return z


def evaluate_policy(scores, z, tree: PolicyTreeModel) -> PolicyValue:
    """Mean score of the arm each row is assigned to, with its t-test
    standard error and the share of rows sent to every arm."""
    g = _gamma(scores)
    z = _z_matrix(z, g.shape[0])
    arms = tree.predict(z)
    if arms.max() >= g.shape[1]:
        raise ValidationError(f"tree assigns arm {int(arms.max())} but scores have {g.shape[1]} arms")
    est = mean_effect(g[np.arange(g.shape[0]), arms])
    shares = np.bincount(arms, minlength=g.shape[1]) / g.shape[0]
    return PolicyValue(est.point, est.se, shares, est)


# exact search kernels; ``order[j]`` is a stable argsort of column j and
# ``mask`` marks the rows of the current node


@njit(cache=True)
def _midpoint(a, b):
    m = 0.5 * (a + b)
    if m >= b:
        m = a
    return m


@njit(cache=True)
def _argmax(v):
    best = 0
    for k in range(1, v.shape[0]):
        if v[k] > v[best]:
            best = k
    return best


@njit(cache=True)
def _merge(f_root, t_root, lf, lt, ll, rf, rt, rl):
    """Complete breadth-first tree from a root split and two subtrees."""
    n_child = lf.shape[0]
    depth_child = 0
    while 2 ** depth_child - 1 < n_child:
        depth_child += 1
    features = np.empty(2 * n_child + 1, np.int64)
    thresholds = np.empty(2 * n_child + 1)
    features[0] = f_root
    thresholds[0] = t_root
    for lv in range(depth_child):
        start = 2 ** lv - 1
        width = 2 ** lv
        out = 2 ** (lv + 1) - 1
        for k in range(width):
            features[out + k] = lf[start + k]
            thresholds[out + k] = lt[start + k]
            features[out + width + k] = rf[start + k]
            thresholds[out + width + k] = rt[start + k]
    leaves = np.concatenate((ll, rl))
    return features, thresholds, leaves


@njit(cache=True)
def _solve1(G, Z, order, mask, tol):
    n, n_arms = G.shape
    q = Z.shape[1]
    total = np.zeros(n_arms)
    for i in range(n):
        if mask[i]:
            total += G[i]
    arm = _argmax(total)
    best = total[arm]
    bf, bt, bl, br = 0, -np.inf, arm, arm
    left = np.zeros(n_arms)
    for j in range(q):
        left[:] = 0.0
        prev = -1
        for t in range(n):
            i = order[j, t]
            if not mask[i]:
                continue
            if prev >= 0 and Z[i, j] > Z[prev, j]:
                la = _argmax(left)
                right = total - left
                ra = _argmax(right)
                if la != ra:
                    v = left[la] + right[ra]
                    if v > best + tol:
                        best = v
                        bf, bt, bl, br = j, _midpoint(Z[prev, j], Z[i, j]), la, ra
            left += G[i]
            prev = i
    features = np.array([bf], np.int64)
    thresholds = np.array([bt])
    leaves = np.array([bl, br], np.int64)
    return best, features, thresholds, leaves


@njit(cache=True)
def _solve2(G, Z, order, mask, tol):
    n = G.shape[0]
    q = Z.shape[1]
    v0, f0, t0, l0 = _solve1(G, Z, order, mask, tol)
    best = v0
    f_best, t_best, l_best = _merge(0, -np.inf, f0, t0, l0, f0, t0, l0)
    for j in range(q):
        left_mask = np.zeros(n, np.bool_)
        right_mask = mask.copy()
        prev = -1
        for t in range(n):
            i = order[j, t]
            if not mask[i]:
                continue
            if prev >= 0 and Z[i, j] > Z[prev, j]:
                vl, fl, tl, ll = _solve1(G, Z, order, left_mask, tol)
                vr, fr, tr, lr = _solve1(G, Z, order, right_mask, tol)
                if vl + vr > best + tol:
                    best = vl + vr
                    f_best, t_best, l_best = _merge(j, _midpoint(Z[prev, j], Z[i, j]), fl, tl, ll, fr, tr, lr)
            left_mask[i] = True
            right_mask[i] = False
            prev = i
    return best, f_best, t_best, l_best


@njit(cache=True)
def _solve3(G, Z, order, mask, tol):
    n = G.shape[0]
    q = Z.shape[1]
    v0, f0, t0, l0 = _solve2(G, Z, order, mask, tol)
    best = v0
    f_best, t_best, l_best = _merge(0, -np.inf, f0, t0, l0, f0, t0, l0)
    for j in range(q):
        left_mask = np.zeros(n, np.bool_)
        right_mask = mask.copy()
        prev = -1
        for t in range(n):
            i = order[j, t]
            if not mask[i]:
                continue
            if prev >= 0 and Z[i, j] > Z[prev, j]:
                vl, fl, tl, ll = _solve2(G, Z, order, left_mask, tol)
                vr, fr, tr, lr = _solve2(G, Z, order, right_mask, tol)
                if vl + vr > best + tol:
                    best = vl + vr
                    f_best, t_best, l_best = _merge(j, _midpoint(Z[prev, j], Z[i, j]), fl, tl, ll, fr, tr, lr)
            left_mask[i] = True
            right_mask[i] = False
            prev = i
    return best, f_best, t_best, l_best


_SOLVERS = {1: _solve1, 2: _solve2, 3: _solve3}


def _coarsen(z: np.ndarray, max_values: int) -> np.ndarray:
    """Round every column up to one of at most ``max_values`` observed
    quantile values, so ``coarse <= c`` iff ``z <= c`` for every cut ``c``."""
    out = z.copy()
    for j in range(z.shape[1]):
        if np.unique(z[:, j]).size <= max_values:
            continue
        cuts = np.unique(np.quantile(z[:, j], np.linspace(0, 1, max_values), method="higher"))
        out[:, j] = cuts[np.searchsorted(cuts, z[:, j], side="left")]
    return out


def _restore_thresholds(thresholds, features, z, coarse):
    # a split between cuts a < b on the coarse scale sends z <= a left;
    # move it to the midpoint between a and the next observed value of z
    out = thresholds.copy()
    for k, (f, t) in enumerate(zip(features, thresholds)):
        if not np.isfinite(t):
            continue
        col = np.unique(z[:, f])
        cut = coarse[:, f][coarse[:, f] <= t].max()
        above = col[col > cut]
        out[k] = float(_midpoint(cut, above[0])) if above.size else np.inf
    return out


def search_exact(scores, z, depth: int, max_values: int | None = None) -> PolicyTreeModel:
    """Tree of depth ``<= depth`` that maximises the summed scores of the
    assigned arms.

    Candidate thresholds are midpoints between consecutive distinct values
    of a feature within the node. Ties go to the lower feature index, then
    the smaller threshold (the all-right ``-inf`` sentinel first), then the
    lower arm; later candidates must be strictly better.

    Parameters
    ----------
    scores : ScoreSet or array of shape (n, arms)
    z : array of shape (n, q)
    depth : {1, 2, 3}
    max_values : int, optional
        Restrict every feature to split points between at most this many
        quantile values. Exact over that restricted class; intended for
        depth 3 on large samples, where the full search is cubic in n.
    """
    if depth not in _SOLVERS:
        raise ValidationError("depth must be 1, 2 or 3")
    g = _gamma(scores)
    if g.shape[0] < 2:
        raise ValidationError("policy search needs at least 2 observations")
    z = _z_matrix(z, g.shape[0])
    zs = z if max_values is None else _coarsen(z, int(max_values))
    order = np.ascontiguousarray(np.argsort(zs, axis=0, kind="stable").T)
    mask = np.ones(g.shape[0], dtype=np.bool_)
    tol = 1e-12 * float(np.abs(g).max(axis=1).sum())
    _, features, thresholds, leaves = _SOLVERS[depth](
        np.ascontiguousarray(g), np.ascontiguousarray(zs), order, mask, tol
    )
    if max_values is not None:
        thresholds = _restore_thresholds(thresholds, features, z, zs)
    return PolicyTreeModel(depth, features, thresholds, leaves)


@dataclass(frozen=True, eq=False)
class CvPolicyTest:
    """Cross-validated policy against sending everyone to one arm."""

    estimates: list
    assignment: np.ndarray
    trees: list
    n: int
    labels: list = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        rows = []
        for w, est in enumerate(self.estimates):
            d = est.to_dict()
            label = self.labels[w] if self.labels else w
            rows.append({"versus": label, "point": d["point"], "se": d["se"],
                         "t": d["t_stat"], "p": d["p_value"], "n": d["n"]})
        return rows


def cross_validate_policy(ds: Dataset | None, scores, z, depth: int, folds: FoldAssignment,
                          max_values: int | None = None) -> CvPolicyTest:
    """Fit a tree on the complement of each fold, assign the fold with it,
    and t-test ``Gamma_i[cv arm] - Gamma_i[w]`` for every arm ``w``."""
    g = _gamma(scores)
    z = _z_matrix(z, g.shape[0])
    if folds.fold_id.shape[0] != g.shape[0]:
        raise ValidationError("fold assignment does not match the scores")
    assignment = np.empty(g.shape[0], dtype=np.int64)
    trees = []
    for k in range(folds.K):
        test = folds.test_index(k)
        if test.size == 0:
            continue
        train = folds.train_index(k)
        tree = search_exact(g[train], z[train], depth, max_values=max_values)
        assignment[test] = tree.predict(z[test])
        trees.append(tree)
    chosen = g[np.arange(g.shape[0]), assignment]
    estimates = [mean_effect(chosen - g[:, w]) for w in range(g.shape[1])]
    labels = list(ds.labels) if ds is not None else []
    return CvPolicyTest(estimates, assignment, trees, g.shape[0], labels)


def policy_agreement(tree_a: PolicyTreeModel, tree_b: PolicyTreeModel, z) -> float:
    """Share of rows that both trees send to the same arm."""
    return float(np.mean(tree_a.predict(z) == tree_b.predict(z)))


class PolicyTree(BaseEstimator):
    """Estimator wrapper around :func:`search_exact`.

    ``fit(Z, scores)`` takes the score matrix in place of a target;
    ``predict(Z)`` returns the assigned arm.
    """

    def __init__(self, depth: int = 2, max_values: int | None = None):
        self.depth = depth
        self.max_values = max_values

    def fit(self, Z, scores):
        Z = check_array(Z, ensure_2d=True)
        g = check_array(_gamma(scores), ensure_2d=True)
        self.tree_ = search_exact(g, Z, self.depth, self.max_values)
        self.n_features_in_ = Z.shape[1]
        self.n_arms_ = g.shape[1]
        return self

    def predict(self, Z):
        check_is_fitted(self, "tree_")
        return self.tree_.predict(check_array(Z, ensure_2d=True))

    def score(self, Z, scores):
        return evaluate_policy(scores, Z, self.tree_).value
