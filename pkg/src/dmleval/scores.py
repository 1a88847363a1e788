"""Doubly robust scores and one-sample t-tests on their means."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import permutations

import numpy as np
from scipy import stats

from .data import Dataset
from .exceptions import ValidationError
from .nuisance import NuisanceEstimates

__all__ = [
    "AtetScores",
    "ContrastScores",
    "EffectEstimate",
    "ScoreSet",
    "apo_score_matrix",
    "apo_scores",
    "apo_table",
    "ate_scores",
    "ate_table",
    "atet_scores",
    "atet_table",
    "default_contrasts",
    "mean_effect",
]


@dataclass(frozen=True, eq=False)
class ScoreSet:
    gamma: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.gamma)):
            raise ValidationError("APO scores must be finite")

    @property
    def n_arms(self) -> int:
        return self.gamma.shape[1]


@dataclass(frozen=True, eq=False)
class ContrastScores:
    delta: np.ndarray
    w: int
    w_ref: int


@dataclass(frozen=True, eq=False)
class AtetScores:
    theta: np.ndarray
    p_w: float
    w: int
    w_ref: int


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    se: float
    t_stat: float
    p_value: float
    n: int

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def apo_score_matrix(y, w, mu_hat, e_hat) -> np.ndarray:
    """Gamma_{i,w} = mu(w, X_i) + D_i(w) (Y_i - mu(w, X_i)) / e_w(X_i)."""
    y = np.asarray(y, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    if np.any(e_hat <= 0):
        raise ValidationError("propensity scores must be strictly positive")
    d = np.asarray(w)[:, None] == np.arange(mu_hat.shape[1])[None, :]
    resid = np.where(d, y[:, None] - mu_hat, 0.0)
    return mu_hat + resid / e_hat


def apo_scores(ds: Dataset, nu: NuisanceEstimates) -> ScoreSet:
    if nu.mu_hat.shape != (ds.n, ds.n_arms):
        raise ValidationError(
            f"nuisance shape {nu.mu_hat.shape} does not match data ({ds.n}, {ds.n_arms})"
        )
    return ScoreSet(apo_score_matrix(ds.y, ds.w, nu.mu_hat, nu.e_hat))


def ate_scores(scores: ScoreSet, w: int, w_ref: int) -> ContrastScores:
    if w == w_ref:
        raise ValueError("a contrast needs two different arms")
    return ContrastScores(scores.gamma[:, w] - scores.gamma[:, w_ref], w, w_ref)


def atet_scores(ds: Dataset, nu: NuisanceEstimates, w: int, w_ref: int) -> AtetScores:
    """Doubly robust score of the effect of ``w`` vs ``w_ref`` on the
    ``w``-treated; rows outside both arms contribute zero."""
    if w == w_ref:
        raise ValueError("a contrast needs two different arms")
    n_w = int(np.sum(ds.w == w))
    if n_w == 0:
        raise ValidationError(f"arm {w} has no observations")
    p_w = n_w / ds.n
    resid = ds.y - nu.mu_hat[:, w_ref]
    treated = ds.w == w
    control = ds.w == w_ref
    theta = np.zeros(ds.n)
    theta[treated] = resid[treated] / p_w
    theta[control] = -nu.e_hat[control, w] * resid[control] / (p_w * nu.e_hat[control, w_ref])
    return AtetScores(theta, p_w, w, w_ref)


def mean_effect(scores) -> EffectEstimate:
    """Mean of a score vector with the 1/N variance of the mean and a
    two-sided normal p-value."""
    s = np.asarray(scores, dtype=float).ravel()
    n = s.size
    if n < 2:
        raise ValueError("need at least two scores")
    point = float(np.mean(s))
    var = float(np.mean((s - point) ** 2))
    se = math.sqrt(var / n)
    if se > 0:
        t = point / se
        p = float(2 * stats.norm.sf(abs(t)))
    else:
        t, p = math.nan, math.nan
    return EffectEstimate(point, se, t, p, n)


def default_contrasts(n_arms: int) -> list[tuple[int, int]]:
    """Every arm against arm 0."""
    return [(w, 0) for w in range(1, n_arms)]


def _row(estimand, arms, est: EffectEstimate) -> dict:
    d = est.to_dict()
    return {"estimand": estimand, "arms": list(arms), "point": d["point"], "se": d["se"],
            "t": d["t_stat"], "p": d["p_value"], "n": d["n"]}


def apo_table(scores: ScoreSet, labels=None) -> list[dict]:
    labels = labels or list(range(scores.n_arms))
    return [_row("APO", [labels[w]], mean_effect(scores.gamma[:, w])) for w in range(scores.n_arms)]


def ate_table(scores: ScoreSet, pairs=None, labels=None) -> list[dict]:
    labels = labels or list(range(scores.n_arms))
    pairs = pairs if pairs is not None else default_contrasts(scores.n_arms)
    return [
        _row("ATE", [labels[w], labels[v]], mean_effect(ate_scores(scores, w, v).delta))
        for w, v in pairs
    ]


def atet_table(ds: Dataset, nu: NuisanceEstimates, pairs=None) -> list[dict]:
    pairs = pairs if pairs is not None else default_contrasts(ds.n_arms)
    return [
        _row("ATET", [ds.labels[w], ds.labels[v]], mean_effect(atet_scores(ds, nu, w, v).theta))
        for w, v in pairs
    ]


def all_pairs(n_arms: int) -> list[tuple[int, int]]:
    return list(permutations(range(n_arms), 2))
