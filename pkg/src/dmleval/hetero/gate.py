"""Group average effects: regressions of a pseudo-outcome on a few
heterogeneity variables (robust OLS, Nadaraya-Watson, B-splines)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import BSpline
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import ValidationError
from ..scores import ContrastScores

__all__ = [
    "BSplineRegressor",
    "CurveEstimate",
    "GateTable",
    "NadarayaWatsonRegressor",
    "gate_kernel",
    "gate_ols",
    "gate_series",
    "hc1_covariance",
]


def _as_delta(delta) -> np.ndarray:
    if isinstance(delta, ContrastScores):
        delta = delta.delta
    return np.asarray(delta, dtype=float).ravel()


def _finite_or_none(v):
    v = float(v)
    return v if math.isfinite(v) else None


# --------------------------------------------------------------------------
# OLS
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GateTable:
    names: list[str]
    coefficients: np.ndarray
    hc_se: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    joint_F: float
    joint_p: float
    n: int

    def to_dict(self) -> dict:
        return {
            "regressors": [
                {"name": name, "coef": _finite_or_none(b), "se": _finite_or_none(s),
                 "t": _finite_or_none(t), "p": _finite_or_none(p)}
                for name, b, s, t, p in zip(self.names, self.coefficients, self.hc_se,
                                            self.t_stats, self.p_values)
            ],
            "joint_F": _finite_or_none(self.joint_F) if self.joint_F is not None else None,
            "joint_p": _finite_or_none(self.joint_p) if self.joint_p is not None else None,
            "n": self.n,
        }


def _collinear_columns(X: np.ndarray, names: Sequence[str]) -> list[str]:
    bad, kept = [], []
    for j in range(X.shape[1]):
        trial = X[:, kept + [j]]
        if np.linalg.matrix_rank(trial) < len(kept) + 1:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def hc1_covariance(X: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """White covariance with the n / (n - k) small-sample factor."""
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    return bread @ meat @ bread * n / (n - k)


def gate_ols(delta, z=None, names: Sequence[str] | None = None) -> GateTable:
    """OLS of the pseudo-outcome on ``[1, z]`` with HC1 standard errors and
    a robust Wald test (divided by the restriction count) of all slopes."""
    y = _as_delta(delta)
    n = y.size
    z = np.empty((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
    q = z.shape[1]
    names = list(names) if names is not None else [f"z{j + 1}" for j in range(q)]
    if len(names) != q:
        raise ValueError("one name per column of z required")
    if n <= q + 1:
        raise ValidationError(f"need more than {q + 1} observations, got {n}")
    X = np.column_stack([np.ones(n), z])
    all_names = ["(Intercept)", *names]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError(f"regressors are collinear: {_collinear_columns(X, all_names)}")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    scale = max(1.0, float(np.max(np.abs(y))))
    if np.max(np.abs(resid)) <= 1e-12 * scale:
        V = np.zeros((q + 1, q + 1))
    else:
        V = hc1_covariance(X, resid)
    se = np.sqrt(np.clip(np.diag(V), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.nan)
    p = np.where(np.isfinite(t), 2 * stats.norm.sf(np.abs(t)), np.nan)
    joint_F = joint_p = None
    if q:
        b = beta[1:]
        if np.all(np.abs(b) <= 1e-12 * scale):
            joint_F, joint_p = 0.0, 1.0
        elif not np.any(V[1:, 1:]):
            joint_F, joint_p = math.inf, 0.0
        else:
            wald = float(b @ np.linalg.pinv(V[1:, 1:]) @ b)
            joint_F = wald / q
            joint_p = float(stats.chi2.sf(wald, q))
    return GateTable(all_names, beta, se, t, p, joint_F, joint_p, n)


# --------------------------------------------------------------------------
# curves
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CurveEstimate:
    grid: np.ndarray
    tau_hat: np.ndarray
    se: np.ndarray
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0):
            raise ValidationError("curve grid must be strictly increasing")

    def to_rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.grid.tolist(), self.tau_hat.tolist(), self.se.tolist()))


def _check_curve_inputs(y, z, grid):
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        if z.shape[1] != 1:
            raise ValidationError("curve GATEs need a single heterogeneity variable")
        z = z[:, 0]
    if z.shape[0] != y.shape[0]:
        raise ValidationError("z and the pseudo-outcome differ in length")
    if np.ptp(z) == 0:
        raise ValidationError("heterogeneity variable is constant")
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.min() < z.min() or grid.max() > z.max():
        raise ValidationError("evaluation grid must lie within the range of z")
    return z, grid


def silverman_bandwidth(z) -> float:
    z = np.asarray(z, dtype=float)
    sd = z.std(ddof=1)
    iqr = np.subtract(*np.percentile(z, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * z.size ** -0.2


class NadarayaWatsonRegressor(RegressorMixin, BaseEstimator):
    """Gaussian-kernel local constant regression on one variable.

    With ``bandwidth=None`` the bandwidth is ``undersmooth`` times the
    leave-one-out CV optimum over ``n_bandwidths`` log-spaced values in
    ``[0.05, 5] x`` Silverman's rule. When there are more than
    ``cv_max_points`` observations, the CV loss is averaged over a seeded
    random subset of that many evaluation points (every point still
    contributes to the fits).
    """

    def __init__(self, bandwidth=None, undersmooth=0.9, n_bandwidths=50,
                 cv_max_points=5000, seed=0):
        self.bandwidth = bandwidth
        self.undersmooth = undersmooth
        self.n_bandwidths = n_bandwidths
        self.cv_max_points = cv_max_points
        self.seed = seed

    def fit(self, z, y):
        z = np.asarray(z, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if np.ptp(z) == 0:
            raise ValidationError("heterogeneity variable is constant")
        self.z_train_ = z
        self.y_train_ = y
        if self.bandwidth is None:
            self.cv_bandwidth_ = self._loo_cv(z, y)
            self.bandwidth_ = self.undersmooth * self.cv_bandwidth_
        else:
            self.cv_bandwidth_ = None
            self.bandwidth_ = float(self.bandwidth)
        return self

    def _loo_cv(self, z, y) -> float:
        grid = np.geomspace(0.05, 5.0, self.n_bandwidths) * silverman_bandwidth(z)
        n = z.size
        pts = np.arange(n)
        if self.cv_max_points is not None and n > self.cv_max_points:
            pts = np.sort(np.random.default_rng(self.seed).choice(n, self.cv_max_points, replace=False))
        loss = np.zeros(grid.size)
        for lo in range(0, pts.size, 512):
            idx = pts[lo:lo + 512]
            d2 = (z[idx, None] - z[None, :]) ** 2
            for b, h in enumerate(grid):
                K = np.exp(-0.5 * d2 / h**2)
                K[np.arange(idx.size), idx] = 0.0
                den = K.sum(axis=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    fit = (K @ y) / den
                loss[b] += np.inf if np.any(den <= 0) else np.sum((y[idx] - fit) ** 2)
        return float(grid[int(np.argmin(loss))])

    def weight_matrix(self, z0) -> np.ndarray:
        check_is_fitted(self, "bandwidth_")
        z0 = np.asarray(z0, dtype=float).ravel()
        if math.isinf(self.bandwidth_):
            return np.full((z0.size, self.z_train_.size), 1.0 / self.z_train_.size)
        d = (z0[:, None] - self.z_train_[None, :]) / self.bandwidth_
        logk = -0.5 * d**2
        logk -= logk.max(axis=1, keepdims=True)
        K = np.exp(logk)
        return K / K.sum(axis=1, keepdims=True)

    def predict(self, z0):
        return self.weight_matrix(z0) @ self.y_train_

    def predict_with_se(self, z0):
        A = self.weight_matrix(z0)
        tau = A @ self.y_train_
        resid2 = (self.y_train_[None, :] - tau[:, None]) ** 2
        return tau, np.sqrt(np.sum(A**2 * resid2, axis=1))


def gate_kernel(delta, z, grid, bandwidth=None, **kwargs) -> CurveEstimate:
    """Kernel GATE curve with pointwise ``sqrt(sum alpha_i^2 (D_i - tau)^2)``
    standard errors."""
    y = _as_delta(delta)
    z, grid = _check_curve_inputs(y, z, grid)
    model = NadarayaWatsonRegressor(bandwidth=bandwidth, **kwargs).fit(z, y)
    tau, se = model.predict_with_se(grid)
    return CurveEstimate(grid, tau, se, {
        "method": "kernel", "bandwidth": model.bandwidth_, "cv_bandwidth": model.cv_bandwidth_,
    })


def _interior_knots(z: np.ndarray, k: int) -> np.ndarray:
    lo, hi = z.min(), z.max()
    knots = np.unique(np.quantile(z, np.arange(1, k + 1) / (k + 1)))
    return knots[(knots > lo) & (knots < hi)]


def bspline_basis(z, interior, degree, lo, hi) -> np.ndarray:
    t = np.r_[[lo] * (degree + 1), interior, [hi] * (degree + 1)]
    return BSpline.design_matrix(np.clip(z, lo, hi), t, degree).toarray()


class BSplineRegressor(RegressorMixin, BaseEstimator):
    """Least-squares B-spline regression on one variable.

    Interior knots sit at equally spaced quantiles. The degree and the
    number of interior knots are chosen by ``cv_folds``-fold CV MSE over
    ``degrees x knot_counts`` (first candidate wins ties).
    """

    def __init__(self, degrees=(2, 3), knot_counts=tuple(range(1, 11)), cv_folds=10, seed=0):
        self.degrees = degrees
        self.knot_counts = knot_counts
        self.cv_folds = cv_folds
        self.seed = seed

    def fit(self, z, y):
        z = np.asarray(z, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if np.ptp(z) == 0:
            raise ValidationError("heterogeneity variable is constant")
        self.lo_, self.hi_ = float(z.min()), float(z.max())
        n = z.size
        fold = np.random.default_rng(self.seed).permutation(n) % self.cv_folds
        best = None
        self.cv_scores_ = {}
        for degree in self.degrees:
            for k in self.knot_counts:
                interior = _interior_knots(z, k)
                B = bspline_basis(z, interior, degree, self.lo_, self.hi_)
                if B.shape[1] >= n * (self.cv_folds - 1) / self.cv_folds:
                    continue
                sse = 0.0
                for f in range(self.cv_folds):
                    tr, te = fold != f, fold == f
                    coef, *_ = np.linalg.lstsq(B[tr], y[tr], rcond=None)
                    sse += float(np.sum((y[te] - B[te] @ coef) ** 2))
                mse = sse / n
                self.cv_scores_[(degree, k)] = mse
                if best is None or mse < best[0]:
                    best = (mse, degree, k, interior)
        if best is None:
            raise ValidationError("too few observations for any B-spline candidate")
        _, self.degree_, self.n_knots_, self.interior_knots_ = best
        B = bspline_basis(z, self.interior_knots_, self.degree_, self.lo_, self.hi_)
        self.coef_, *_ = np.linalg.lstsq(B, y, rcond=None)
        resid = y - B @ self.coef_
        if np.max(np.abs(resid)) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
            self.cov_ = np.zeros((B.shape[1], B.shape[1]))
        else:
            self.cov_ = hc1_covariance(B, resid)
        return self

    def basis(self, z0) -> np.ndarray:
        check_is_fitted(self, "coef_")
        return bspline_basis(np.asarray(z0, dtype=float).ravel(), self.interior_knots_,
                             self.degree_, self.lo_, self.hi_)

    def predict(self, z0):
        return self.basis(z0) @ self.coef_

    def predict_with_se(self, z0):
        B = self.basis(z0)
        var = np.einsum("ij,jk,ik->i", B, self.cov_, B)
        return B @ self.coef_, np.sqrt(np.clip(var, 0, None))


def gate_series(delta, z, grid, **kwargs) -> CurveEstimate:
    """B-spline GATE curve with HC1 pointwise standard errors."""
    y = _as_delta(delta)
    z, grid = _check_curve_inputs(y, z, grid)
    model = BSplineRegressor(**kwargs).fit(z, y)
    tau, se = model.predict_with_se(grid)
    return CurveEstimate(grid, tau, se, {
        "method": "series", "degree": model.degree_, "n_knots": model.n_knots_,
        "interior_knots": model.interior_knots_.tolist(),
    })
