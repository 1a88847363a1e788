"""Cross-fitted outcome regressions and normalised propensity scores."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .data import Dataset, FoldAssignment
from .exceptions import ValidationError
from .smoother import PROPENSITY_PARAMS, ForestParams, fit, tune

__all__ = [
    "NuisanceEstimates",
    "PROPENSITY_FLOOR",
    "crossfit",
    "normalise_propensities",
    "propensity_summary",
]

PROPENSITY_FLOOR = 1e-6

_OUTCOME, _PROPENSITY = 0, 1


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    """Cross-fitted ``mu_hat`` and normalised ``e_hat`` (both ``N x (T+1)``)."""

    mu_hat: np.ndarray
    e_hat: np.ndarray
    folds: FoldAssignment
    trim_flag: np.ndarray

    def __post_init__(self):
        if self.mu_hat.shape != self.e_hat.shape:
            raise ValidationError("mu_hat and e_hat must have the same shape")
        if not np.all(np.isfinite(self.mu_hat)):
            raise ValidationError("mu_hat has non-finite entries")
        if np.any(self.e_hat <= 0):
            raise ValidationError("e_hat must be strictly positive")

    @property
    def n_arms(self) -> int:
        return self.mu_hat.shape[1]

    def to_frame(self) -> pd.DataFrame:
        cols = {"fold": self.folds.fold_id}
        for w in range(self.n_arms):
            cols[f"mu_{w}"] = self.mu_hat[:, w]
        for w in range(self.n_arms):
            cols[f"e_{w}"] = self.e_hat[:, w]
        cols["trim_flag"] = self.trim_flag.astype(int)
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "NuisanceEstimates":
        df = pd.read_csv(path, float_precision="round_trip")
        n_arms = sum(c.startswith("mu_") for c in df.columns)
        fold_id = df["fold"].to_numpy(np.int64)
        folds = FoldAssignment(fold_id, int(fold_id.max()) + 1, seed)
        return cls(
            df[[f"mu_{w}" for w in range(n_arms)]].to_numpy(),
            df[[f"e_{w}" for w in range(n_arms)]].to_numpy(),
            folds,
            df["trim_flag"].to_numpy().astype(bool),
        )


def normalise_propensities(raw, floor: float = PROPENSITY_FLOOR) -> np.ndarray:
    """Clip below at ``floor``, then rescale every row to sum to one."""
    e = np.maximum(np.asarray(raw, dtype=float), floor)
    return e / e.sum(axis=1, keepdims=True)


def _forest_seed(base: int, fold: int, arm: int, kind: int) -> int:
    return int(np.random.SeedSequence([int(base), fold, arm, kind]).generate_state(1)[0])


def _fit_predict(x_train, y_train, x_test, params, seed, n_jobs):
    if isinstance(params, ForestParams):
        chosen = params
    else:
        chosen = tune(x_train, y_train, [p.with_seed(seed) for p in params], n_jobs=n_jobs)
    return fit(x_train, y_train, chosen.with_seed(seed), n_jobs=n_jobs).predict(x_test)


def crossfit(
    ds: Dataset,
    folds: FoldAssignment,
    params: ForestParams | Sequence[ForestParams] | None = None,
    trim: float | None = None,
    propensity_params: ForestParams | Sequence[ForestParams] | None = None,
    n_jobs: int | None = None,
) -> NuisanceEstimates:
    """K-fold cross-fitting of ``mu(w, x)`` and ``e_w(x)``.

    For every fold ``k`` and arm ``w`` an outcome forest is fitted on the
    arm-``w`` rows outside fold ``k`` and a propensity forest on the
    indicator ``1(W = w)`` over all rows outside fold ``k``; both predict
    fold ``k``. Raw propensities are clipped at 1e-6 and normalised per row.

    ``params`` may be a list of :class:`ForestParams`, in which case each
    regression is tuned by out-of-bag MSE over the list. Seeds of the
    individual forests derive from ``params.seed`` (or the first grid
    entry's seed), the fold and the arm. ``trim`` only flags rows with a
    normalised propensity below it; nothing is dropped.
    """
    params = params if params is not None else ForestParams()
    propensity_params = propensity_params if propensity_params is not None else PROPENSITY_PARAMS
    base_seed = params.seed if isinstance(params, ForestParams) else params[0].seed
    if folds.fold_id.shape[0] != ds.n:
        raise ValidationError("fold assignment does not match the dataset")
    n, n_arms = ds.n, ds.n_arms
    mu = np.full((n, n_arms), np.nan)
    raw = np.full((n, n_arms), np.nan)
    d = ds.indicators()
    for k in range(folds.K):
        train, test = folds.train_index(k), folds.test_index(k)
        if test.size == 0:
            continue
        for w in range(n_arms):
            arm_train = train[ds.w[train] == w]
            if arm_train.size == 0:
                raise ValidationError(
                    f"arm {ds.labels[w]!r} has no observations outside fold {k}"
                )
            mu[test, w] = _fit_predict(
                ds.x[arm_train], ds.y[arm_train], ds.x[test], params,
                _forest_seed(base_seed, k, w, _OUTCOME), n_jobs,
            )
            raw[test, w] = _fit_predict(
                ds.x[train], d[train, w], ds.x[test], propensity_params,
                _forest_seed(base_seed, k, w, _PROPENSITY), n_jobs,
            )
    e = normalise_propensities(raw)
    flag = np.zeros(n, dtype=bool) if trim is None else np.any(e < trim, axis=1)
    return NuisanceEstimates(mu, e, folds, flag)


_QUANTILES = (0.01, 0.25, 0.5, 0.75, 0.99)


def propensity_summary(e_hat, labels=None) -> pd.DataFrame:
    """Mean, SD, min, 1/25/50/75/99% quantiles and max of every column.

    Quantiles interpolate linearly between order statistics; the SD uses
    the sample (n - 1) convention.
    """
    e = np.asarray(e_hat, dtype=float)
    labels = list(labels) if labels is not None else list(range(e.shape[1]))
    rows = {
        "Mean": e.mean(axis=0),
        "SD": e.std(axis=0, ddof=1) if e.shape[0] > 1 else np.zeros(e.shape[1]),
        "Minimum": e.min(axis=0),
    }
    for q, vals in zip(_QUANTILES, np.quantile(e, _QUANTILES, axis=0)):
        rows[f"Q{round(q * 100)}"] = vals
    rows["Maximum"] = e.max(axis=0)
    return pd.DataFrame(rows, index=labels).T
