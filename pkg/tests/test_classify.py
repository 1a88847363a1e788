import numpy as np
import pytest

from dmleval.exceptions import ValidationError
from dmleval.hetero import classification_analysis


def test_perfect_correlation_oracle(rng):
    tau = rng.normal(size=10_000)
    table = classification_analysis(tau, tau[:, None], names=["t"])
    z = (tau - tau.mean()) / tau.std(ddof=1)
    lo, hi = np.quantile(tau, [0.2, 0.8])
    oracle = z[tau >= hi].mean() - z[tau <= lo].mean()
    assert table.loc["t", "tau0"] == pytest.approx(oracle, rel=1e-6)
    assert oracle > 1


def test_constant_and_independent_columns(rng):
    n = 10_000
    tau = rng.normal(size=n)
    x = np.column_stack([np.full(n, 3.0), rng.normal(size=n), tau + 0.1 * rng.normal(size=n)])
    table = classification_analysis(tau, x, names=["c", "noise", "signal"], effect_names=["a"])
    assert table.loc["c", "a"] == 0.0 and bool(table.loc["c", "zero_sd"])
    assert abs(table.loc["noise", "a"]) < 0.1
    assert list(table.index) == ["signal", "noise", "c"]


def test_multiple_effects_sorted_by_max(rng):
    n = 500
    t1, t2 = rng.normal(size=n), rng.normal(size=n)
    x = np.column_stack([t1, t2, rng.normal(size=n)])
    table = classification_analysis(np.column_stack([t1, -3 * t2]), x, effect_names=["e1", "e2"])
    assert table.loc["x2", "e2"] < -1
    assert set(table.index[:2]) == {"x1", "x2"}


def test_too_few_rows():
    with pytest.raises(ValidationError):
        classification_analysis(np.arange(9.0), np.ones((9, 1)))
