"""Datasets, CSV ingestion, fold assignment and the synthetic design.

The synthetic generator draws confounders, treatment and outcome from a
fully specified design so that every nuisance function and every effect
is known in closed form. Acceptance checks compare estimates against the
:class:`GroundTruth` it returns.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ParseError, SchemaError, SupportError, ValidationError

__all__ = [
    "ColumnRoles",
    "Dataset",
    "FoldAssignment",
    "GroundTruth",
    "Standardized",
    "SyntheticSpec",
    "assign_folds",
    "generate_synthetic",
    "load_csv",
    "standardize",
    "write_csv",
]


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnRoles:
    """Which CSV columns play which role.

    ``heterogeneity`` defaults to the confounders when left empty.
    """

    outcome: str
    treatment: str
    confounders: tuple[str, ...]
    heterogeneity: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "confounders", tuple(self.confounders))
        object.__setattr__(self, "heterogeneity", tuple(self.heterogeneity))
        if not self.confounders:
            raise SchemaError("schema needs at least one confounder column")
        roles = [self.outcome, self.treatment, *self.confounders]
        if len(set(roles)) != len(roles):
            raise SchemaError("a column is assigned to more than one role")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcomes, contiguous treatment codes, confounders and heterogeneity
    variables for ``N`` observations.

    ``labels[k]`` is the original treatment label of code ``k``.
    """

    y: np.ndarray
    w: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    labels: tuple = ()
    outcome_name: str = "y"
    treatment_name: str = "w"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        w = np.asarray(self.w)
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n = y.shape[0]
        if w.shape != (n,) or x.shape[0] != n or z.shape[0] != n:
            raise ValidationError(
                f"row counts disagree: y={n}, w={w.shape[0]}, x={x.shape[0]}, z={z.shape[0]}"
            )
        if not np.issubdtype(w.dtype, np.integer):
            if not np.all(np.equal(np.mod(w, 1), 0)):
                raise ValidationError("treatment codes must be integers")
            w = w.astype(np.int64)
        w = w.astype(np.int64)
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")
        n_arms = int(w.max()) + 1 if n else 0
        if n and w.min() < 0:
            raise ValidationError("treatment codes must be nonnegative")
        counts = np.bincount(w, minlength=n_arms)
        if n_arms < 2:
            raise ValidationError("need >= 2 arms")
        if np.any(counts == 0):
            empty = [int(k) for k in np.flatnonzero(counts == 0)]
            raise ValidationError(f"arms with zero observations: {empty}")
        for arr in (y, w, x, z):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(x.shape[1])))
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"z{j + 1}" for j in range(z.shape[1])))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(n_arms)))
        if len(self.x_names) != x.shape[1] or len(self.z_names) != z.shape[1]:
            raise ValidationError("column names do not match matrix widths")
        if len(self.labels) != n_arms:
            raise ValidationError("one label per arm required")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_arms(self) -> int:
        return len(self.labels)

    @property
    def arm_counts(self) -> np.ndarray:
        return np.bincount(self.w, minlength=self.n_arms)

    def indicators(self) -> np.ndarray:
        """``N x (T+1)`` matrix of treatment dummies D_i(w)."""
        return (self.w[:, None] == np.arange(self.n_arms)[None, :]).astype(float)

    def label_mapping(self) -> dict:
        return {lab: k for k, lab in enumerate(self.labels)}

    def subset(self, idx) -> "Dataset":
        """Rows ``idx``; arm codes are kept, so every arm must remain."""
        idx = np.asarray(idx)
        return Dataset(
            self.y[idx], self.w[idx], self.x[idx], self.z[idx],
            self.x_names, self.z_names, self.labels,
            self.outcome_name, self.treatment_name,
        )

    def with_outcome(self, y) -> "Dataset":
        return Dataset(
            y, self.w, self.x, self.z, self.x_names, self.z_names,
            self.labels, self.outcome_name, self.treatment_name,
        )

    def z_columns(self, names: Sequence[str]) -> np.ndarray:
        """Columns of ``z`` (or, failing that, ``x``) by name."""
        cols = []
        for name in names:
            if name in self.z_names:
                cols.append(self.z[:, self.z_names.index(name)])
            elif name in self.x_names:
                cols.append(self.x[:, self.x_names.index(name)])
            else:
                raise SchemaError(f"unknown column '{name}'")
        return np.column_stack(cols) if cols else np.empty((self.n, 0))


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column '{column}': non-numeric value {cell!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column '{column}': missing or non-finite value {cell!r}")
    return value


def _parse_label(cell: str):
    try:
        value = float(cell)
    except ValueError:
        return cell
    if math.isfinite(value) and value == int(value) and re.fullmatch(r"[+-]?\d+", cell.strip()):
        return int(cell)
    return value


def load_csv(path, schema: ColumnRoles) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    Rows are numbered from 1 (the first data row after the header) in error
    messages. Treatment labels are re-encoded to ``0..T`` in order of first
    appearance; ``Dataset.labels`` keeps the originals.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        z_cols = schema.heterogeneity or schema.confounders
        needed = [schema.outcome, schema.treatment, *schema.confounders, *z_cols]
        missing = [c for c in dict.fromkeys(needed) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        pos = {name: header.index(name) for name in dict.fromkeys(needed)}

        y, raw_w, x, z = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            y.append(_parse_float(row[pos[schema.outcome]], row_no, schema.outcome))
            cell = row[pos[schema.treatment]].strip()
            if cell == "":
                raise ParseError(f"row {row_no}, column '{schema.treatment}': missing value")
            raw_w.append(cell)
            x.append([_parse_float(row[pos[c]], row_no, c) for c in schema.confounders])
            z.append([_parse_float(row[pos[c]], row_no, c) for c in z_cols])

    codes: dict[str, int] = {}
    for cell in raw_w:
        codes.setdefault(cell, len(codes))
    if len(codes) < 2:
        raise ValidationError("need >= 2 arms")
    labels = tuple(_parse_label(c) for c in codes)
    w = np.array([codes[c] for c in raw_w], dtype=np.int64)
    return Dataset(
        np.array(y), w, np.array(x).reshape(len(y), -1), np.array(z).reshape(len(y), -1),
        x_names=tuple(schema.confounders), z_names=tuple(z_cols), labels=labels,
        outcome_name=schema.outcome, treatment_name=schema.treatment,
    )


def write_csv(ds: Dataset, path) -> ColumnRoles:
    """Write ``ds`` so that :func:`load_csv` with the returned roles
    reproduces it bit for bit (floats are written with ``repr``)."""
    extra_z = [n for n in ds.z_names if n not in ds.x_names]
    header = [ds.outcome_name, ds.treatment_name, *ds.x_names, *extra_z]
    z_pos = [ds.z_names.index(n) for n in extra_z]
    labels = [str(lab) for lab in ds.labels]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(ds.n):
            out.writerow(
                [repr(float(ds.y[i])), labels[ds.w[i]]]
                + [repr(float(v)) for v in ds.x[i]]
                + [repr(float(ds.z[i, j])) for j in z_pos]
            )
    return ColumnRoles(ds.outcome_name, ds.treatment_name, ds.x_names, ds.z_names)


# --------------------------------------------------------------------------
# Folds
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_id: np.ndarray
    K: int
    seed: int

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_id == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_id != k)

    def split(self):
        """Yield ``(train, test)`` index pairs, fold 0 first."""
        for k in range(self.K):
            yield self.train_index(k), self.test_index(k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_id, minlength=self.K)


def assign_folds(ds, K: int, seed: int) -> FoldAssignment:
    """Random ``K``-fold partition stratified by treatment arm.

    ``ds`` may be a :class:`Dataset` or a plain vector of arm codes. Each
    arm is shuffled and dealt round-robin onto the folds, continuing the
    deal across arms, so both the per-arm and the overall fold sizes
    differ by at most one.
    """
    if isinstance(ds, Dataset):
        w, labels = ds.w, ds.labels
    else:
        w = np.asarray(ds, dtype=np.int64).ravel()
        labels = tuple(range(int(w.max()) + 1))
    K = int(K)
    if K < 2:
        raise ValueError("K must be at least 2")
    counts = np.bincount(w, minlength=len(labels))
    for arm in np.argsort(counts, kind="stable"):
        if 0 < counts[arm] < K:
            raise ValueError(
                f"K={K} exceeds the size of arm {labels[arm]!r} ({counts[arm]} observations)"
            )
    rng = np.random.default_rng(seed)
    fold_id = np.empty(w.shape[0], dtype=np.int64)
    offset = 0
    for arm in range(len(labels)):
        members = rng.permutation(np.flatnonzero(w == arm))
        fold_id[members] = (offset + np.arange(members.size)) % K
        offset += members.size
    fold_id.setflags(write=False)
    return FoldAssignment(fold_id, K, seed)


# --------------------------------------------------------------------------
# Standardisation
# --------------------------------------------------------------------------


class Standardized(NamedTuple):
    values: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    constant: np.ndarray


def standardize(matrix) -> Standardized:
    """Column-wise mean zero, sample-SD one. Constant columns are returned
    unchanged and flagged in ``constant``."""
    m = np.asarray(matrix, dtype=float)
    vector = m.ndim == 1
    m = m.reshape(m.shape[0], -1)
    if m.shape[0] < 2:
        raise ValueError("standardize needs at least 2 rows")
    means = m.mean(axis=0)
    sds = m.std(axis=0, ddof=1)
    constant = ~(sds > 0)
    out = m.copy()
    keep = ~constant
    out[:, keep] = (m[:, keep] - means[keep]) / sds[keep]
    if vector:
        out = out.ravel()
    return Standardized(out, means, sds, constant)


# --------------------------------------------------------------------------
# Synthetic design
# --------------------------------------------------------------------------

_TERM = re.compile(r"^(?:(?P<coef>[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\*)?(?P<name>-?[a-z_]+\d*|[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)$")
_BASIS = {
    "x": lambda v: v,
    "sq_x": lambda v: v**2,
    "abs_x": np.abs,
    "sin_x": lambda v: np.sin(np.pi * v),
    "step_x": lambda v: (v > 0).astype(float),
}


def evaluate_expression(expr: str, x: np.ndarray) -> np.ndarray:
    """Evaluate an effect/baseline identifier such as ``"0.5+x1"`` or
    ``"x1+sq_x2+2*sin_x3"``.

    Terms are separated by ``+``; each is a number or ``[coef*]basis<j>``
    where ``basis`` is one of ``x, sq_x, abs_x, sin_x, step_x`` and ``j``
    is the 1-based confounder index. ``"zero"`` is an alias for ``0``.
    """
    x = np.atleast_2d(x)
    out = np.zeros(x.shape[0])
    text = re.sub(r"(?<![eE])-", "+-", expr.replace(" ", ""))
    if text in ("zero", ""):
        return out
    for term in filter(None, text.split("+")):
        match = _TERM.match(term)
        if not match:
            raise ValueError(f"cannot parse term {term!r} in {expr!r}")
        coef = float(match["coef"]) if match["coef"] else 1.0
        name = match["name"]
        try:
            out += coef * float(name)
            continue
        except ValueError:
            pass
        sign = 1.0
        if name.startswith("-"):
            sign, name = -1.0, name[1:]
        base = re.match(r"^([a-z_]+?)(\d+)$", name)
        if not base or base[1] not in _BASIS:
            raise ValueError(f"unknown basis function {name!r} in {expr!r}")
        j = int(base[2]) - 1
        if not 0 <= j < x.shape[1]:
            raise ValueError(f"{name!r} refers to a confounder that does not exist")
        out += sign * coef * _BASIS[base[1]](x[:, j])
    return out


def _default_coef() -> tuple:
    rows = [[0.0] * 11 for _ in range(3)]
    rows[1][1], rows[1][2] = 0.75, -0.75
    rows[2][2] = rows[2][3] = rows[2][4] = 0.5
    return tuple(tuple(r) for r in rows)


@dataclass(frozen=True)
class SyntheticSpec:
    """Data-generating design: ``y = m(x) + tau_W(x) + noise``.

    Confounders are independent Uniform(-1, 1). Treatment follows a
    multinomial logit with coefficient rows ``[intercept, x1..xp]`` per arm.
    ``subgroup_propensity = (arm, feature, threshold, prob)`` overrides the
    logit: where ``x[feature] > threshold`` (0-based feature), ``arm`` gets
    probability ``prob`` and the other arms share the rest pro rata.
    """

    n: int = 10_000
    n_arms: int = 3
    p: int = 10
    propensity_coef: tuple = field(default_factory=_default_coef)
    baseline: str = "x1+sq_x2+sin_x3"
    effects: tuple = ("0", "0.5+x1", "1+step_x2")
    noise_sd: float = 1.0
    subgroup_propensity: tuple | None = None

    def __post_init__(self):
        coef = np.asarray(self.propensity_coef, dtype=float)
        if coef.shape != (self.n_arms, self.p + 1):
            raise ValueError(
                f"propensity_coef must be {self.n_arms} x {self.p + 1}, got {coef.shape}"
            )
        if len(self.effects) != self.n_arms:
            raise ValueError("one effect identifier per arm required")
        object.__setattr__(self, "propensity_coef", tuple(tuple(map(float, r)) for r in coef))
        object.__setattr__(self, "effects", tuple(self.effects))
        if self.subgroup_propensity is not None:
            object.__setattr__(self, "subgroup_propensity", tuple(self.subgroup_propensity))

    def draw_x(self, n: int, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, self.p))

    def propensity(self, x) -> np.ndarray:
        """True ``e_w(x)`` as an ``n x (T+1)`` matrix."""
        x = np.atleast_2d(x)
        coef = np.asarray(self.propensity_coef)
        logits = coef[:, 0][None, :] + x @ coef[:, 1:].T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        e /= e.sum(axis=1, keepdims=True)
        if self.subgroup_propensity is not None:
            arm, feat, thr, prob = self.subgroup_propensity
            arm, feat = int(arm), int(feat)
            sub = x[:, feat] > thr
            others = np.delete(np.arange(self.n_arms), arm)
            rest = e[np.ix_(sub, others)]
            e[np.ix_(sub, others)] = (1.0 - prob) * rest / rest.sum(axis=1, keepdims=True)
            e[sub, arm] = prob
        return e

    def baseline_mean(self, x) -> np.ndarray:
        return evaluate_expression(self.baseline, x)

    def effect(self, arm: int, x) -> np.ndarray:
        return evaluate_expression(self.effects[arm], x)

    def outcome_mean(self, x) -> np.ndarray:
        """True ``mu(w, x)`` for every arm, ``n x (T+1)``."""
        m = self.baseline_mean(x)
        return np.column_stack([m + self.effect(a, x) for a in range(self.n_arms)])

    def tau(self, w: int, w_ref: int, x) -> np.ndarray:
        return self.effect(w, x) - self.effect(w_ref, x)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["propensity_coef"] = tuple(tuple(r) for r in d["propensity_coef"])
        d["effects"] = tuple(d["effects"])
        if d.get("subgroup_propensity") is not None:
            d["subgroup_propensity"] = tuple(d["subgroup_propensity"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True APOs and pairwise ATEs of a :class:`SyntheticSpec`.

    ``ate[w, w']`` is ``apo[w] - apo[w']`` exactly as computed.
    """

    apo: np.ndarray
    ate: np.ndarray
    seed: int
    spec: SyntheticSpec

    def tau(self, w: int, w_ref: int, x) -> np.ndarray:
        return self.spec.tau(w, w_ref, x)

    def to_json(self) -> str:
        return json.dumps(
            {
                "apo": self.apo.tolist(),
                "ate": self.ate.tolist(),
                "seed": self.seed,
                "spec": self.spec.to_dict(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        return cls(np.array(d["apo"]), np.array(d["ate"]), d["seed"], SyntheticSpec.from_dict(d["spec"]))


N_TRUTH_DRAWS = 1_000_000
N_SUPPORT_PROBE = 10_000
SUPPORT_FLOOR = 1e-4


def check_support(spec: SyntheticSpec) -> float:
    """Smallest propensity over a fixed probe sample; raises below 1e-4."""
    probe = spec.draw_x(N_SUPPORT_PROBE, np.random.default_rng(0))
    low = float(spec.propensity(probe).min())
    if low < SUPPORT_FLOOR:
        raise SupportError(f"propensity {low:.2e} below {SUPPORT_FLOOR:g} on the probe sample")
    return low


def true_apo(spec: SyntheticSpec, seed: int, draws: int = N_TRUTH_DRAWS) -> np.ndarray:
    """Monte Carlo average of ``mu(w, X)`` over ``draws`` fresh covariates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    total = np.zeros(spec.n_arms)
    chunk = 250_000
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        total += spec.outcome_mean(spec.draw_x(m, rng)).sum(axis=0)
        done += m
    return total / draws


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset of ``spec.n`` rows together with its ground truth.

    Redraws the treatment vector (up to 100 times) if an arm ends up empty.
    """
    check_support(spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    x = spec.draw_x(spec.n, rng)
    e = spec.propensity(x)
    cum = np.cumsum(e, axis=1)
    for _ in range(100):
        u = rng.uniform(size=(spec.n, 1))
        w = np.minimum((u > cum).sum(axis=1), spec.n_arms - 1)
        if np.all(np.bincount(w, minlength=spec.n_arms) > 0):
            break
    else:
        raise ValidationError("an arm stayed empty in 100 draws; increase n")
    mu = spec.outcome_mean(x)
    y = mu[np.arange(spec.n), w] + spec.noise_sd * rng.standard_normal(spec.n)
    names = tuple(f"x{j + 1}" for j in range(spec.p))
    ds = Dataset(y, w, x, x, x_names=names, z_names=names)
    apo = true_apo(spec, seed)
    truth = GroundTruth(apo, apo[:, None] - apo[None, :], seed, spec)
    return ds, truth
