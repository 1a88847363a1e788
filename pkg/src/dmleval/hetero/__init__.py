"""Group and individualised effect estimators built on the contrast scores."""
from .classify import classification_analysis
from .gate import (
    BSplineRegressor,
    CurveEstimate,
    GateTable,
    NadarayaWatsonRegressor,
    gate_kernel,
    gate_ols,
    gate_series,
)
from .iate import (
    IateResult,
    dr_learner_crossfit,
    dr_learner_full,
    iate_crossfit,
    ndr_learner_crossfit,
    ndr_learner_full,
    ndr_weights,
)

__all__ = [
    "BSplineRegressor",
    "CurveEstimate",
    "GateTable",
    "IateResult",
    "NadarayaWatsonRegressor",
    "classification_analysis",
    "dr_learner_crossfit",
    "dr_learner_full",
    "gate_kernel",
    "gate_ols",
    "gate_series",
    "iate_crossfit",
    "ndr_learner_crossfit",
    "ndr_learner_full",
    "ndr_weights",
]
