"""Double machine learning program evaluation with multiple treatments.

Cross-fitted honest-forest nuisances feed doubly robust scores for average
potential outcomes, average effects, effects on the treated, group and
individualised effects, and exact policy trees.
"""
__version__ = "0.1.0"

from .data import (
    ColumnRoles,
    Dataset,
    FoldAssignment,
    GroundTruth,
    SyntheticSpec,
    assign_folds,
    generate_synthetic,
    load_csv,
    write_csv,
)
from .estimator import AipwEstimator
from .nuisance import NuisanceEstimates, crossfit
from .scores import EffectEstimate, ScoreSet, apo_scores, ate_scores, atet_scores, mean_effect
from .smoother import ForestParams, HonestForestRegressor

__all__ = [
    "AipwEstimator",
    "ColumnRoles",
    "Dataset",
    "EffectEstimate",
    "FoldAssignment",
    "ForestParams",
    "GroundTruth",
    "HonestForestRegressor",
    "NuisanceEstimates",
    "ScoreSet",
    "SyntheticSpec",
    "apo_scores",
    "assign_folds",
    "ate_scores",
    "atet_scores",
    "crossfit",
    "generate_synthetic",
    "load_csv",
    "mean_effect",
    "write_csv",
]
