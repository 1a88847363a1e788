"""Individualised effects with the DR-learner and its normalised variant.

Both learners regress the doubly robust contrast score on the confounders
with a linear smoother. Writing the smoother prediction as
``sum_i alpha_i(x) Delta_i`` splits it into an outcome-regression part and
two inverse-probability-weighted residual parts with weights

    lambda^w_i(x) = alpha_i(x) D_i(w) / e_w(X_i).

The NDR-learner divides each residual part by ``sum_i lambda^w_i(x)`` so the
residual weights at every ``x`` sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset, assign_folds
from ..exceptions import ValidationError
from ..nuisance import NuisanceEstimates, normalise_propensities
from ..smoother import PROPENSITY_PARAMS, ForestParams, SmootherWeights, fit

__all__ = [
    "IateResult",
    "dr_learner_crossfit",
    "dr_learner_full",
    "iate_crossfit",
    "ndr_combine",
    "ndr_learner_crossfit",
    "ndr_learner_full",
    "ndr_weights",
    "smoother_components",
]


@dataclass(frozen=True, eq=False)
class IateResult:
    tau_hat: np.ndarray
    learner: str
    variant: str
    fold_id: np.ndarray | None = None
    fallback: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.learner}-{self.variant}"


def ndr_weights(alpha, d_w, e_hat_w):
    """Normalised residual weights ``lambda / sum(lambda)`` for one arm.

    ``alpha`` is a :class:`SmootherWeights` or a dense weight vector over
    the training rows. Returns ``(weights, empty)``; ``empty`` is True and
    the weights are all zero when the arm gets no smoother mass.
    """
    d_w = np.asarray(d_w, dtype=float)
    e_hat_w = np.asarray(e_hat_w, dtype=float)
    if isinstance(alpha, SmootherWeights):
        alpha = alpha.dense(d_w.shape[0])
    alpha = np.asarray(alpha, dtype=float)
    lam = alpha * d_w / e_hat_w
    total = lam.sum()
    if total <= 0:
        return np.zeros_like(lam), True
    return lam / total, False


def smoother_components(y, w, mu_hat, e_hat, arm, arm_ref) -> np.ndarray:
    """Training-row columns whose alpha-weighted sums make up both learners:
    ``[mu_w - mu_ref, lam_w * resid_w, lam_w, lam_ref * resid_ref, lam_ref]``
    (``lam`` here without the ``alpha`` factor)."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w)
    ipw_w = (w == arm) / e_hat[:, arm]
    ipw_ref = (w == arm_ref) / e_hat[:, arm_ref]
    return np.column_stack([
        mu_hat[:, arm] - mu_hat[:, arm_ref],
        ipw_w * (y - mu_hat[:, arm]),
        ipw_w,
        ipw_ref * (y - mu_hat[:, arm_ref]),
        ipw_ref,
    ])


def ndr_combine(sums: np.ndarray):
    """DR and NDR predictions from alpha-weighted component sums.

    Where an arm has zero lambda-mass the unnormalised term (which is then
    zero) is kept and the point is flagged.
    """
    reg, res_w, lam_w, res_ref, lam_ref = sums.T
    dr = reg + res_w - res_ref
    empty_w = lam_w <= 0
    empty_ref = lam_ref <= 0
    norm_w = np.where(empty_w, res_w, res_w / np.where(empty_w, 1.0, lam_w))
    norm_ref = np.where(empty_ref, res_ref, res_ref / np.where(empty_ref, 1.0, lam_ref))
    return dr, reg + norm_w - norm_ref, empty_w | empty_ref


def _contrast(ds: Dataset, nu: NuisanceEstimates, w: int, w_ref: int):
    if w == w_ref:
        raise ValueError("a contrast needs two different arms")
    comps = smoother_components(ds.y, ds.w, nu.mu_hat, nu.e_hat, w, w_ref)
    delta = comps[:, 0] + comps[:, 1] - comps[:, 3]
    return comps, delta


def _final_stage(final_params, smoother):
    if smoother is not None:
        return smoother
    return (final_params or ForestParams()).estimator()


def dr_learner_full(ds: Dataset, nu: NuisanceEstimates, w: int, w_ref: int,
                    final_params: ForestParams | None = None, smoother=None) -> IateResult:
    """Regress the contrast score on ``x`` over the whole sample and return
    the in-sample predictions."""
    _, delta = _contrast(ds, nu, w, w_ref)
    model = _final_stage(final_params, smoother).fit(ds.x, delta)
    return IateResult(model.predict(ds.x), "DR", "full", meta={"w": w, "w_ref": w_ref})


def ndr_learner_full(ds: Dataset, nu: NuisanceEstimates, w: int, w_ref: int,
                     final_params: ForestParams | None = None, smoother=None) -> IateResult:
    """Full-sample NDR-learner: normalised residual weights at every ``x_i``."""
    comps, delta = _contrast(ds, nu, w, w_ref)
    model = _final_stage(final_params, smoother).fit(ds.x, delta)
    _, ndr, empty = ndr_combine(model.weighted_sum(ds.x, comps))
    return IateResult(ndr, "NDR", "full", fallback=empty, meta={"w": w, "w_ref": w_ref})


def _seed(base, *parts) -> int:
    return int(np.random.SeedSequence([int(base), *parts]).generate_state(1)[0])


def iate_crossfit(
    ds: Dataset,
    w: int,
    w_ref: int,
    nuisance_params: ForestParams | None = None,
    propensity_params: ForestParams | None = None,
    final_params: ForestParams | None = None,
    seed: int = 0,
    smoother=None,
    learners=("DR", "NDR"),
    n_jobs: int | None = None,
) -> dict[str, IateResult]:
    """Four-fold cross-fitted DR- and NDR-learner.

    For every held-out quarter ``S4`` the other three quarters rotate
    through the roles (propensity fold, outcome fold, pseudo-outcome fold):
    ``(S1, S2, S3)``, ``(S2, S3, S1)``, ``(S3, S1, S2)``. Each rotation fits
    propensity forests for all arms on its propensity fold (normalised per
    row), outcome forests for ``w`` and ``w_ref`` on its outcome fold, forms
    the contrast score on its pseudo-outcome fold, regresses it on ``x`` and
    predicts ``S4``. The IATE is the mean of the three predictions; rotating
    the held-out quarter gives every row an out-of-sample estimate. Both
    learners share the nuisance and final-stage fits.
    """
    if w == w_ref:
        raise ValueError("a contrast needs two different arms")
    nuisance_params = nuisance_params or ForestParams()
    propensity_params = propensity_params or PROPENSITY_PARAMS
    final_params = final_params or ForestParams()
    counts = ds.arm_counts
    for arm in range(ds.n_arms):
        if counts[arm] < 4:
            raise ValidationError(
                f"arm {ds.labels[arm]!r} has {counts[arm]} observations; 4-fold cross-fitting needs >= 4"
            )
    folds = assign_folds(ds, 4, seed)
    d = ds.indicators()
    dr = np.zeros(ds.n)
    ndr = np.zeros(ds.n)
    fallback = np.zeros(ds.n, dtype=bool)
    for h in range(4):
        test = folds.test_index(h)
        others = [k for k in range(4) if k != h]
        for r in range(3):
            prop_rows = folds.test_index(others[r])
            out_rows = folds.test_index(others[(r + 1) % 3])
            reg_rows = folds.test_index(others[(r + 2) % 3])
            x_reg = ds.x[reg_rows]

            raw = np.column_stack([
                fit(ds.x[prop_rows], d[prop_rows, a],
                    propensity_params.with_seed(_seed(seed, h, r, 1, a)), n_jobs=n_jobs).predict(x_reg)
                for a in range(ds.n_arms)
            ])
            e_reg = normalise_propensities(raw)
            mu_reg = np.zeros((reg_rows.size, ds.n_arms))
            for a in (w, w_ref):
                arm_rows = out_rows[ds.w[out_rows] == a]
                if arm_rows.size == 0:
                    raise ValidationError(f"arm {ds.labels[a]!r} is missing from fold {others[(r + 1) % 3]}")
                mu_reg[:, a] = fit(ds.x[arm_rows], ds.y[arm_rows],
                                   nuisance_params.with_seed(_seed(seed, h, r, 0, a)),
                                   n_jobs=n_jobs).predict(x_reg)

            comps = smoother_components(ds.y[reg_rows], ds.w[reg_rows], mu_reg, e_reg, w, w_ref)
            delta = comps[:, 0] + comps[:, 1] - comps[:, 3]
            if smoother is not None:
                from sklearn.base import clone
                model = clone(smoother).fit(x_reg, delta)
            else:
                model = final_params.with_seed(_seed(seed, h, r, 2)).estimator(n_jobs=n_jobs).fit(x_reg, delta)
            dr[test] += model.predict(ds.x[test]) / 3
            if "NDR" in learners:
                _, ndr_k, empty = ndr_combine(model.weighted_sum(ds.x[test], comps))
                ndr[test] += ndr_k / 3
                fallback[test] |= empty
    meta = {"w": w, "w_ref": w_ref, "seed": seed}
    out = {}
    if "DR" in learners:
        out["DR"] = IateResult(dr, "DR", "crossfit", folds.fold_id, meta=meta)
    if "NDR" in learners:
        out["NDR"] = IateResult(ndr, "NDR", "crossfit", folds.fold_id, fallback, meta=meta)
    return out


def dr_learner_crossfit(ds: Dataset, w: int, w_ref: int, **kwargs) -> IateResult:
    return iate_crossfit(ds, w, w_ref, learners=("DR",), **kwargs)["DR"]


def ndr_learner_crossfit(ds: Dataset, w: int, w_ref: int, **kwargs) -> IateResult:
    return iate_crossfit(ds, w, w_ref, learners=("NDR",), **kwargs)["NDR"]
