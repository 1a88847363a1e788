"""Covariate profiles of the observations with the largest and smallest
predicted effects."""
from __future__ import annotations

import numpy as np
import pandas as pd

from ..data import standardize
from ..exceptions import ValidationError

__all__ = ["classification_analysis"]


def classification_analysis(tau_hat, x, names=None, effect_names=None) -> pd.DataFrame:
    """Standardized covariate means in the top minus the bottom quintile.

    Parameters
    ----------
    tau_hat : array of shape (n,) or (n, m)
        Predicted effects, one column per contrast.
    x : array of shape (n, p)
    names, effect_names : sequences of str, optional

    Returns
    -------
    DataFrame
        One row per covariate and one difference column per effect, plus
        ``zero_sd``. Rows are sorted by the largest absolute difference
        across effect columns (stable, so ties keep the input order).
    """
    tau = np.asarray(tau_hat, dtype=float)
    if tau.ndim == 1:
        tau = tau[:, None]
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = tau.shape[0]
    if n < 10:
        raise ValidationError("classification analysis needs at least 10 observations")
    if x.shape[0] != n:
        raise ValidationError("tau_hat and x have different numbers of rows")
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(x.shape[1])]
    effect_names = list(effect_names) if effect_names is not None else [f"tau{k}" for k in range(tau.shape[1])]
    std = standardize(x)
    cols = {}
    for k, name in enumerate(effect_names):
        lo, hi = np.quantile(tau[:, k], [0.2, 0.8])
        top = tau[:, k] >= hi
        bottom = tau[:, k] <= lo
        diff = std.values[top].mean(axis=0) - std.values[bottom].mean(axis=0)
        cols[name] = np.where(std.constant, 0.0, diff)
    table = pd.DataFrame(cols, index=names)
    table["zero_sd"] = std.constant
    order = np.argsort(-table[effect_names].abs().max(axis=1).to_numpy(), kind="stable")
    return table.iloc[order]
