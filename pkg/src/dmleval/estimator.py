"""Estimator-style entry point for average effects."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import Dataset, assign_folds
from .nuisance import crossfit
from .scores import EffectEstimate, apo_scores, ate_scores, atet_scores, mean_effect
from .smoother import ForestParams

__all__ = ["AipwEstimator"]


class AipwEstimator(BaseEstimator):
    """Cross-fitted doubly robust estimator of APOs and pairwise effects.

    Parameters
    ----------
    n_folds : int, default 5
    num_trees, min_leaf, mtry : forest settings for the outcome models
    propensity_min_leaf : int, default 10
    trim : float, optional
        Only flags rows whose propensity falls below it.
    seed : int, default 0
    n_jobs : int, optional

    Attributes
    ----------
    dataset_, nuisance_, scores_ : fitted intermediate objects
    apo_ : list of EffectEstimate, one per arm
    """

    def __init__(self, n_folds=5, num_trees=500, min_leaf=5, mtry=None,
                 propensity_min_leaf=10, trim=None, seed=0, n_jobs=None):
        self.n_folds = n_folds
        self.num_trees = num_trees
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.propensity_min_leaf = propensity_min_leaf
        self.trim = trim
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y, treatment):
        """Fit on confounders ``X``, outcome ``y`` and arm codes ``treatment``
        (arbitrary labels, recoded to ``0..T`` in sorted order)."""
        X = check_array(X, ensure_2d=True)
        y = check_array(y, ensure_2d=False).ravel()
        treatment = np.asarray(treatment).ravel()
        check_consistent_length(X, y, treatment)
        labels, codes = np.unique(treatment, return_inverse=True)
        self.classes_ = labels
        self.dataset_ = Dataset(y, codes, X, X, labels=tuple(labels.tolist()))
        folds = assign_folds(self.dataset_, self.n_folds, self.seed)
        params = ForestParams(self.num_trees, self.mtry, self.min_leaf, seed=self.seed)
        prop = ForestParams(self.num_trees, self.mtry, self.propensity_min_leaf, seed=self.seed)
        self.nuisance_ = crossfit(self.dataset_, folds, params, self.trim, prop, n_jobs=self.n_jobs)
        self.scores_ = apo_scores(self.dataset_, self.nuisance_)
        self.apo_ = [mean_effect(self.scores_.gamma[:, w]) for w in range(len(labels))]
        self.n_features_in_ = X.shape[1]
        return self

    def _code(self, label) -> int:
        hits = np.flatnonzero(self.classes_ == label)
        if hits.size == 0:
            raise ValueError(f"unknown treatment label {label!r}")
        return int(hits[0])

    def ate(self, w, w_ref) -> EffectEstimate:
        check_is_fitted(self, "scores_")
        return mean_effect(ate_scores(self.scores_, self._code(w), self._code(w_ref)).delta)

    def atet(self, w, w_ref) -> EffectEstimate:
        check_is_fitted(self, "scores_")
        return mean_effect(atet_scores(self.dataset_, self.nuisance_, self._code(w), self._code(w_ref)).theta)

    def score_matrix(self):
        """The fitted APO score matrix (rows in training order)."""
        check_is_fitted(self, "scores_")
        return self.scores_.gamma.copy()
