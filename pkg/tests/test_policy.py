import itertools

import numpy as np
import pytest

from dmleval.data import FoldAssignment
from dmleval.exceptions import ValidationError
from dmleval.policy import (
    PolicyTree,
    PolicyTreeModel,
    cross_validate_policy,
    evaluate_policy,
    policy_agreement,
    search_exact,
)
from dmleval.scores import ScoreSet, apo_table


def _cuts(col):
    u = np.unique(col)
    return [-np.inf] + list((u[:-1] + u[1:]) / 2)


def _side(g):
    return g.sum(axis=0).max() if g.shape[0] else 0.0


def brute_depth1(g, z):
    best = g.sum(axis=0).max()
    for j in range(z.shape[1]):
        for t in _cuts(z[:, j]):
            left = z[:, j] <= t
            best = max(best, _side(g[left]) + _side(g[~left]))
    return best


def brute_depth2(g, z):
    # a depth-2 tree is a root split with a depth-1 tree (or leaf) on each side
    best = brute_depth1(g, z)
    for j in range(z.shape[1]):
        for t in _cuts(z[:, j]):
            left = z[:, j] <= t
            parts = []
            for side in (left, ~left):
                parts.append(brute_depth1(g[side], z[side]) if side.sum() else 0.0)
            best = max(best, sum(parts))
    return best


def _value(g, z, tree):
    return g[np.arange(g.shape[0]), tree.predict(z)].sum()


def _instance(seed, n, q, arms, levels=5):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, arms)), r.integers(0, levels, size=(n, q)).astype(float)


@pytest.mark.parametrize("seed", range(20))
def test_depth1_matches_enumeration(seed):
    g, z = _instance(seed, 20, 2, 3)
    tree = search_exact(g, z, 1)
    assert _value(g, z, tree) == pytest.approx(brute_depth1(g, z), abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_depth1_larger_instances(seed):
    g, z = _instance(100 + seed, 50, 3, 4, levels=12)
    assert _value(g, z, search_exact(g, z, 1)) == pytest.approx(brute_depth1(g, z), abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_depth2_matches_enumeration(seed):
    g, z = _instance(200 + seed, 20, 2, 3)
    tree = search_exact(g, z, 2)
    assert _value(g, z, tree) == pytest.approx(brute_depth2(g, z), abs=1e-12)


def test_depth3_at_least_depth2_and_monotone():
    g, z = _instance(7, 40, 2, 3, levels=8)
    values = [_value(g, z, search_exact(g, z, d)) for d in (1, 2, 3)]
    assert values[0] <= values[1] + 1e-12 <= values[2] + 2e-12
    # depth 3 reaches the value of the best split into two depth-2 subtrees
    best = values[1]
    for j in range(2):
        for t in _cuts(z[:, j]):
            left = z[:, j] <= t
            best = max(best, sum(brute_depth2(g[s], z[s]) if s.sum() else 0 for s in (left, ~left)))
    assert values[2] == pytest.approx(best, abs=1e-9)


def test_two_observation_value_example():
    g = np.array([[1.0, 4.0], [6.0, 2.0]])
    z = np.array([[0.0], [1.0]])
    rules = {
        "all_0": PolicyTreeModel.leaf(0),
        "z0_to_0": PolicyTreeModel(1, [0], [0.5], [0, 1]),
        "z0_to_1": PolicyTreeModel(1, [0], [0.5], [1, 0]),
        "all_1": PolicyTreeModel.leaf(1),
    }
    values = {k: evaluate_policy(g, z, t).value for k, t in rules.items()}
    assert values["z0_to_0"] == (g[0, 0] + g[1, 1]) / 2
    assert values["z0_to_1"] == (g[0, 1] + g[1, 0]) / 2 == 5.0
    best = search_exact(g, z, 1)
    assert best.predict(z).tolist() == [1, 0]


def test_single_leaf_value_is_apo(small_data, small_nuisance):
    from dmleval.scores import apo_scores
    ds, _ = small_data
    s = apo_scores(ds, small_nuisance)
    for w, row in enumerate(apo_table(s)):
        v = evaluate_policy(s, ds.z, PolicyTreeModel.leaf(w))
        assert v.value == pytest.approx(row["point"], abs=1e-12)
        assert v.shares[w] == 1.0


def test_evaluate_permutation_and_shares():
    g, z = _instance(3, 30, 2, 3)
    tree = search_exact(g, z, 2)
    perm = np.random.default_rng(0).permutation(30)
    a, b = evaluate_policy(g, z, tree), evaluate_policy(g[perm], z[perm], tree)
    assert a.value == pytest.approx(b.value, abs=1e-12)
    assert a.shares.sum() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        evaluate_policy(g, z[:, :1], PolicyTreeModel(1, [1], [0.0], [0, 1]))


def test_dominant_arm_gives_single_leaf():
    r = np.random.default_rng(1)
    z = r.normal(size=(60, 2))
    g = np.zeros((60, 3))
    g[:, 2] = 1.0
    for d in (1, 2, 3):
        tree = search_exact(g, z, d)
        assert np.all(tree.predict(z) == 2)
        assert np.all(tree.thresholds == -np.inf)
        assert "<=" not in tree.render()


def test_constant_shift_keeps_tree():
    g, z = _instance(11, 30, 2, 3)
    for d in (1, 2):
        a, b = search_exact(g, z, d), search_exact(g + 5.0, z, d)
        assert a.to_dict() == b.to_dict()


def test_column_permutation_equivariance():
    g, z = _instance(12, 30, 2, 3)
    perm = np.array([2, 0, 1])
    inv = np.argsort(perm)
    for d in (1, 2):
        a = search_exact(g, z, d)
        b = search_exact(g[:, perm], z, d)
        assert np.array_equal(inv[a.predict(z)], b.predict(z))


def test_tie_break_lowest_feature_and_threshold():
    z = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    g = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
    tree = search_exact(g, z, 1)
    assert tree.features[0] == 0 and tree.thresholds[0] == 1.5
    assert tree.leaves.tolist() == [0, 1]
    # all-equal scores: the non-split sentinel and arm 0 win
    flat = search_exact(np.zeros((4, 2)), z, 1)
    assert flat.thresholds[0] == -np.inf and flat.predict(z).tolist() == [0] * 4


def test_max_values_restricted_exactness():
    r = np.random.default_rng(4)
    z = r.normal(size=(200, 2))
    g = r.normal(size=(200, 3))
    full = search_exact(g, z, 1)
    same = search_exact(g, z, 1, max_values=500)
    assert full.to_dict() == same.to_dict()
    coarse = search_exact(g, z, 1, max_values=8)
    assert _value(g, z, coarse) <= _value(g, z, full) + 1e-12
    # enumerate splits just above each of the 8 quantile cuts
    best = g.sum(axis=0).max()
    for j in range(2):
        cuts = np.unique(np.quantile(z[:, j], np.linspace(0, 1, 8), method="higher"))
        for c in cuts:
            left = z[:, j] <= c
            best = max(best, _side(g[left]) + _side(g[~left]))
    assert _value(g, z, coarse) == pytest.approx(best, abs=1e-12)


def test_errors():
    with pytest.raises(ValidationError):
        search_exact(np.zeros((5, 2)), np.zeros((5, 1)), 4)
    with pytest.raises(ValidationError):
        search_exact(np.zeros((1, 2)), np.zeros((1, 1)), 1)
    with pytest.raises(ValidationError):
        search_exact(np.zeros((5, 2)), np.zeros((4, 1)), 1)


def test_json_round_trip_and_render():
    g, z = _instance(5, 40, 2, 3, levels=10)
    tree = search_exact(g, z, 2)
    back = PolicyTreeModel.from_json(tree.to_json())
    assert back.to_dict() == tree.to_dict()
    assert np.array_equal(back.predict(z), tree.predict(z))
    d = PolicyTreeModel(1, [0], [-np.inf], [0, 2]).to_dict()
    assert d == {"depth": 1, "nodes": [{"feature": 0, "threshold": "-inf"}], "leaves": [0, 2]}
    text = PolicyTreeModel(1, [1], [0.25], [0, 2]).render(["age", "income"], ["a", "b", "c"])
    assert text.splitlines() == ["income <= 0.25", "  arm a", "income > 0.25", "  arm c"]


def test_agreement():
    z = np.linspace(-1, 1, 20)[:, None]
    a = PolicyTreeModel(1, [0], [0.0], [0, 1])
    b = PolicyTreeModel(1, [0], [0.5], [0, 1])
    assert policy_agreement(a, a, z) == 1.0
    assert policy_agreement(PolicyTreeModel.leaf(0), PolicyTreeModel.leaf(1), z) == 0.0
    assert policy_agreement(a, b, z) == policy_agreement(b, a, z) == 0.75


def test_cv_dominant_collapse_and_determinism():
    r = np.random.default_rng(8)
    n = 100
    g = r.normal(size=(n, 3))
    g[:, 1] += 10
    z = r.normal(size=(n, 2))
    folds = FoldAssignment(np.arange(n) % 5, 5, 0)
    cv = cross_validate_policy(None, ScoreSet(g), z, 1, folds)
    assert np.all(cv.assignment == 1)
    assert cv.estimates[1].point == 0.0
    assert cv.estimates[0].point == pytest.approx(np.mean(g[:, 1] - g[:, 0]))
    assert len(cv.trees) == 5 and cv.n == n
    again = cross_validate_policy(None, g, z, 1, folds)
    assert np.array_equal(again.assignment, cv.assignment)
    rows = cv.to_rows()
    assert [row["versus"] for row in rows] == [0, 1, 2]
    assert rows[1]["t"] is None


def test_cv_uses_out_of_fold_trees():
    r = np.random.default_rng(9)
    n = 60
    g, z = r.normal(size=(n, 2)), r.normal(size=(n, 1))
    folds = FoldAssignment(np.arange(n) % 3, 3, 0)
    cv = cross_validate_policy(None, g, z, 1, folds)
    for k, tree in enumerate(cv.trees):
        train = folds.train_index(k)
        assert tree.to_dict() == search_exact(g[train], z[train], 1).to_dict()
        assert np.array_equal(cv.assignment[folds.test_index(k)], tree.predict(z[folds.test_index(k)]))


def test_sklearn_wrapper():
    g, z = _instance(2, 30, 2, 3)
    est = PolicyTree(depth=1).fit(z, g)
    assert np.array_equal(est.predict(z), search_exact(g, z, 1).predict(z))
    assert est.score(z, g) == pytest.approx(_value(g, z, est.tree_) / 30)
