"""Monte Carlo checks of orthogonality and double robustness of the APO score.

Every check draws a fresh sample from a :class:`SyntheticSpec`, where the
true ``mu(w, x)`` and ``e_w(x)`` are known in closed form, and compares a
sample mean against its Monte Carlo standard error.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Union

import numpy as np
from scipy.stats import qmc

from .data import SyntheticSpec
from .exceptions import SupportError, ValidationError

__all__ = [
    "IdentificationReport",
    "OrthogonalityReport",
    "SCENARIOS",
    "dr_identification_check",
    "ipw_derivative_analytic",
    "neyman_check",
    "run_battery",
]

Direction = Union[float, Callable[[np.ndarray], np.ndarray]]

STEPS = (1e-4, 1e-5)
SUPPORT_RADIUS = 1e-3
TOLERANCE_SIGMAS = 4.0
SCENARIOS = ("both-correct", "wrong-outcome", "wrong-propensity")
_CHUNK = 200_000


def _evaluate(direction: Direction, x: np.ndarray) -> np.ndarray:
    if callable(direction):
        out = np.asarray(direction(x), dtype=float)
        return np.broadcast_to(out, (x.shape[0],)).copy()
    return np.full(x.shape[0], float(direction))


def _describe(direction: Direction) -> str:
    if callable(direction):
        return getattr(direction, "__name__", "function")
    return repr(float(direction))


def _mc_chunks(spec: SyntheticSpec, n_mc: int, seed: int):
    """Yield ``(x, d, y, mu, e)`` for one arm-agnostic draw in fixed chunks."""
    if n_mc < 2:
        raise ValidationError("n_mc must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    done = 0
    while done < n_mc:
        m = min(_CHUNK, n_mc - done)
        x = spec.draw_x(m, rng)
        e = spec.propensity(x)
        u = rng.uniform(size=(m, 1))
        w = np.minimum((u > np.cumsum(e, axis=1)).sum(axis=1), spec.n_arms - 1)
        mu = spec.outcome_mean(x)
        y = mu[np.arange(m), w] + spec.noise_sd * rng.standard_normal(m)
        yield x, w, y, mu, e
        done += m


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(values))
    return mean, float(np.std(values) / math.sqrt(values.size))


@dataclass(frozen=True)
class OrthogonalityReport:
    """Numerical derivative of ``E[psi]`` along a nuisance perturbation.

    ``derivative`` is the Richardson combination of the two central
    differences; ``target`` is 0 for the doubly robust score and the
    analytic derivative for the IPW score.
    """

    score: str
    arm: int
    direction_mu: str
    direction_e: str
    steps: tuple
    derivative_h1: float
    derivative_h2: float
    derivative: float
    mc_se: float
    target: float
    tolerance: float
    passed: bool
    n_mc: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steps"] = list(self.steps)
        d["check"] = "neyman_orthogonality"
        return d


def _psi(score, d, y, mu, e):
    if score == "dr":
        return mu + d * (y - mu) / e
    return d * y / e


def neyman_check(
    spec: SyntheticSpec,
    direction: tuple[Direction, Direction],
    n_mc: int = 1_000_000,
    seed: int = 0,
    arm: int = 1,
    score: str = "dr",
    tolerance: float = TOLERANCE_SIGMAS,
) -> OrthogonalityReport:
    """Derivative in ``r`` at 0 of ``E psi(Y, W; mu + r dmu, e + r de)``.

    ``direction = (dmu, de)`` holds the perturbations of ``mu(arm, .)`` and
    ``e_arm(.)``, each a constant or a function of the covariate matrix.
    Central differences with steps 1e-4 and 1e-5 are taken per observation
    and combined as ``(100 D(1e-5) - D(1e-4)) / 99``. The Monte Carlo SE is
    that of the per-observation combined derivatives.

    For ``score="ipw"`` (``D Y / e``) the target is the analytic derivative
    from :func:`ipw_derivative_analytic`; the doubly robust score targets 0.

    Raises
    ------
    SupportError
        If ``e + r de`` leaves (0, 1) for some ``|r| <= 1e-3``.
    """
    if score not in ("dr", "ipw"):
        raise ValueError("score must be 'dr' or 'ipw'")
    if not 0 <= arm < spec.n_arms:
        raise ValidationError(f"arm {arm} out of range")
    dmu_fn, de_fn = direction
    h1, h2 = STEPS
    parts = []
    for x, w, y, mu_all, e_all in _mc_chunks(spec, n_mc, seed):
        d = (w == arm).astype(float)
        mu, e = mu_all[:, arm], e_all[:, arm]
        dmu, de = _evaluate(dmu_fn, x), _evaluate(de_fn, x)
        for r in (-SUPPORT_RADIUS, SUPPORT_RADIUS):
            moved = e + r * de
            if np.any(moved <= 0) or np.any(moved >= 1):
                raise SupportError("perturbed propensity leaves (0, 1) within |r| <= 1e-3")
        diffs = []
        for h in (h1, h2):
            up = _psi(score, d, y, mu + h * dmu, e + h * de)
            down = _psi(score, d, y, mu - h * dmu, e - h * de)
            diffs.append((up - down) / (2 * h))
        parts.append(np.column_stack(diffs))
    per_obs = np.concatenate(parts)
    combined = (100.0 * per_obs[:, 1] - per_obs[:, 0]) / 99.0
    derivative, se = _mean_se(combined)
    target = 0.0 if score == "dr" else ipw_derivative_analytic(spec, de_fn, arm)
    dev = abs(derivative - target)
    passed = dev == 0.0 if se == 0.0 else dev < tolerance * se
    return OrthogonalityReport(
        score, arm, _describe(dmu_fn), _describe(de_fn), STEPS,
        float(np.mean(per_obs[:, 0])), float(np.mean(per_obs[:, 1])),
        derivative, se, target, tolerance, bool(passed), int(n_mc),
    )


def ipw_derivative_analytic(spec: SyntheticSpec, de: Direction, arm: int, log2_points: int = 20) -> float:
    """``-E[mu(arm, X) de(X) / e_arm(X)]``, the derivative of ``E[D Y / e]``
    along ``e + r de``.

    The covariate integral over the uniform cube is evaluated with a fixed
    scrambled Sobol rule of ``2**log2_points`` points, whose error is far
    below the Monte Carlo noise of the numerical derivative.
    """
    sobol = qmc.Sobol(spec.p, scramble=True, seed=12345)
    x = 2.0 * sobol.random_base2(log2_points) - 1.0
    mu = spec.outcome_mean(x)[:, arm]
    e = spec.propensity(x)[:, arm]
    return float(-np.mean(mu * _evaluate(de, x) / e))


@dataclass(frozen=True)
class IdentificationReport:
    """Mean of ``Gamma - mu_arm(X)`` under one misspecification scenario."""

    scenario: str
    score: str
    arm: int
    bias: float
    mc_se: float
    tolerance: float
    unbiased: bool
    n_mc: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["check"] = "dr_identification"
        return d


def dr_identification_check(
    spec: SyntheticSpec,
    scenario: str,
    n_mc: int = 20_000,
    seed: int = 0,
    arm: int = 1,
    g: Direction = 0.0,
    h: Direction = 0.5,
    score: str = "dr",
    tolerance: float = TOLERANCE_SIGMAS,
    epsilon: float = 1e-3,
) -> IdentificationReport:
    """Bias of the APO score when one nuisance is replaced by a wrong one.

    ``wrong-outcome`` uses ``g(x)`` in place of ``mu(arm, x)`` and
    ``wrong-propensity`` uses ``h(x)`` in place of ``e_arm(x)``; the other
    nuisance stays true. The bias is the sample mean of
    ``Gamma_i - mu_arm(X_i)``, so covariate sampling noise cancels.
    ``score="ipw"`` evaluates ``D Y / e`` instead, which ignores ``g``.

    Raises
    ------
    SupportError
        If ``h`` leaves ``(epsilon, 1 - epsilon)`` on the sample.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    if score not in ("dr", "ipw"):
        raise ValueError("score must be 'dr' or 'ipw'")
    if not 0 <= arm < spec.n_arms:
        raise ValidationError(f"arm {arm} out of range")
    parts = []
    for x, w, y, mu_all, e_all in _mc_chunks(spec, n_mc, seed):
        d = (w == arm).astype(float)
        mu_true = mu_all[:, arm]
        mu, e = mu_true, e_all[:, arm]
        if scenario == "wrong-outcome":
            mu = _evaluate(g, x)
        elif scenario == "wrong-propensity":
            e = _evaluate(h, x)
            if np.any(e <= epsilon) or np.any(e >= 1 - epsilon):
                raise SupportError(f"h(x) must stay in ({epsilon:g}, {1 - epsilon:g})")
        parts.append(_psi(score, d, y, mu, e) - mu_true)
    bias, se = _mean_se(np.concatenate(parts))
    return IdentificationReport(scenario, score, arm, bias, se, tolerance,
                                bool(abs(bias) < tolerance * se), int(n_mc))


def _linear_x1(x):
    return 0.5 * x[:, 0]


def _bounded_e(x):
    return 0.05 * np.sin(np.pi * x[:, 1])


def run_battery(spec: SyntheticSpec | None = None, seed: int = 0, n_mc: int = 1_000_000,
                n_ident: int = 20_000, arm: int = 1) -> list[dict]:
    """All orthogonality and identification checks with an ``ok`` flag each.

    The IPW wrong-propensity row is a negative control: it is ``ok`` when
    the bias is detected.
    """
    spec = spec or SyntheticSpec()
    rows = []
    for k, direction in enumerate([(1.0, 0.0), (0.0, 0.05), (_linear_x1, _bounded_e)]):
        r = neyman_check(spec, direction, n_mc, seed + k, arm, "dr").to_dict()
        r["ok"] = r["passed"]
        rows.append(r)
    r = neyman_check(spec, (0.0, 0.1), n_mc, seed + 10, arm, "ipw").to_dict()
    r["ok"] = r["passed"]
    rows.append(r)
    for k, scenario in enumerate(SCENARIOS):
        r = dr_identification_check(spec, scenario, n_ident, seed + 20 + k, arm).to_dict()
        r["ok"] = r["unbiased"]
        rows.append(r)
    r = dr_identification_check(spec, "wrong-propensity", n_ident, seed + 30, arm, score="ipw").to_dict()
    r["ok"] = not r["unbiased"]
    r["negative_control"] = True
    rows.append(r)
    return rows
