import numpy as np
import pytest
from sklearn.base import clone

from dmleval import AipwEstimator
from dmleval.data import assign_folds
from dmleval.nuisance import crossfit
from dmleval.scores import apo_scores, ate_scores, mean_effect
from dmleval.smoother import ForestParams


def test_matches_functional_path(small_data):
    ds, _ = small_data
    labels = np.array(["c", "a", "b"])[ds.w]
    est = AipwEstimator(num_trees=20, seed=3).fit(ds.x, ds.y, labels)
    assert est.classes_.tolist() == ["a", "b", "c"]
    codes = np.searchsorted(est.classes_, labels)
    assert np.array_equal(est.dataset_.w, codes)
    folds = assign_folds(est.dataset_, 5, 3)
    nu = crossfit(est.dataset_, folds, ForestParams(20, seed=3),
                  propensity_params=ForestParams(20, min_leaf=10, seed=3))
    s = apo_scores(est.dataset_, nu)
    assert np.array_equal(est.score_matrix(), s.gamma)
    assert est.ate("a", "c").point == mean_effect(ate_scores(s, 0, 2).delta).point
    assert est.atet("b", "c").n == ds.n
    assert len(est.apo_) == 3


def test_unknown_label_and_clone(small_data):
    ds, _ = small_data
    est = AipwEstimator(num_trees=10).fit(ds.x, ds.y, ds.w)
    with pytest.raises(ValueError):
        est.ate(5, 0)
    assert clone(est).get_params() == est.get_params()
