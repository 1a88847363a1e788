"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import ColumnRoles, _parse_label
from .exceptions import ConfigError
from .smoother import PROPENSITY_PARAMS, ForestParams, default_grid

__all__ = ["GateSpec", "RunConfig", "load_config", "parse_config_text"]

GATE_METHODS = ("ols", "kernel", "series")
IATE_LEARNERS = ("DR", "NDR")
IATE_VARIANTS = ("crossfit", "full")


@dataclass(frozen=True)
class GateSpec:
    method: str
    columns: tuple[str, ...]

    @property
    def name(self) -> str:
        return f"{self.method}_{'_'.join(self.columns)}"


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs.

    List-valued keys take comma-separated values; ``gate`` and
    ``policy_features`` take ``;``-separated groups, e.g.
    ``gate = ols:x1,x2; kernel:x1`` and ``policy_features = x1,x2; x3``.
    ``contrasts`` takes ``label:label`` pairs (``1:0, 2:0``); by default
    every arm is compared with the first one.
    """

    input: str = ""
    outcome: str = "y"
    treatment: str = "w"
    confounders: tuple[str, ...] = ()
    heterogeneity: tuple[str, ...] = ()
    folds: int = 5
    num_trees: int = 500
    mtry: int | None = None
    min_leaf: int = 5
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    propensity_min_leaf: int = PROPENSITY_PARAMS.min_leaf
    tune: bool = False
    trim: float | None = None
    contrasts: tuple | None = None
    atet: bool = True
    gate: tuple[GateSpec, ...] = ()
    gate_grid_points: int = 25
    iate: tuple[str, ...] = ()
    iate_variant: str = "crossfit"
    classification: bool = True
    policy_depths: tuple[int, ...] = (1, 2, 3)
    policy_features: tuple[tuple[str, ...], ...] = ()
    policy_max_values: int | None = None
    policy_max_values_depth3: int | None = 32
    seed: int = 0
    out: str = "dmleval_out"

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        bad = [d for d in self.policy_depths if d not in (1, 2, 3)]
        if bad:
            raise ConfigError(f"policy_depths must be a subset of {{1, 2, 3}}, got {bad}")
        for spec in self.gate:
            if spec.method not in GATE_METHODS:
                raise ConfigError(f"unknown gate method {spec.method!r}; use one of {GATE_METHODS}")
            if spec.method != "ols" and len(spec.columns) != 1:
                raise ConfigError(f"gate method {spec.method!r} takes exactly one column")
        bad = [l for l in self.iate if l not in IATE_LEARNERS]
        if bad:
            raise ConfigError(f"unknown IATE learners {bad}; use {IATE_LEARNERS}")
        if self.iate_variant not in IATE_VARIANTS:
            raise ConfigError(f"iate_variant must be one of {IATE_VARIANTS}")

    @property
    def roles(self) -> ColumnRoles:
        return ColumnRoles(self.outcome, self.treatment, self.confounders, self.heterogeneity)

    def forest_params(self) -> ForestParams | list[ForestParams]:
        base = ForestParams(self.num_trees, self.mtry, self.min_leaf, self.subsample_fraction,
                            self.honesty_fraction, self.seed)
        return default_grid(len(self.confounders), base) if self.tune else base

    def final_params(self) -> ForestParams:
        return ForestParams(self.num_trees, self.mtry, self.min_leaf, self.subsample_fraction,
                            self.honesty_fraction, self.seed)

    def propensity_params(self) -> ForestParams:
        return ForestParams(self.num_trees, self.mtry, self.propensity_min_leaf,
                            self.subsample_fraction, self.honesty_fraction, self.seed)

    def referenced_columns(self) -> list[str]:
        cols = [c for g in self.gate for c in g.columns]
        cols += [c for s in self.policy_features for c in s]
        return list(dict.fromkeys(cols))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gate"] = [f"{g.method}:{','.join(g.columns)}" for g in self.gate]
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _optional(conv):
    def parse(value: str):
        return None if value.strip().lower() in ("", "none") else conv(value)
    return parse


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _contrasts(value: str):
    if value.strip().lower() in ("", "default"):
        return None
    pairs = []
    for item in _list(value):
        parts = item.split(":")
        if len(parts) != 2:
            raise ValueError(f"contrast {item!r} is not of the form a:b")
        pairs.append((_parse_label(parts[0].strip()), _parse_label(parts[1].strip())))
    return tuple(pairs)


def _gate(value: str) -> tuple[GateSpec, ...]:
    specs = []
    for group in (g.strip() for g in value.split(";")):
        if not group:
            continue
        method, sep, cols = group.partition(":")
        if not sep:
            raise ValueError(f"gate entry {group!r} is not of the form method:columns")
        specs.append(GateSpec(method.strip().lower(), _list(cols)))
    return tuple(specs)


def _groups(value: str) -> tuple[tuple[str, ...], ...]:
    return tuple(_list(g) for g in value.split(";") if _list(g))


_PARSERS = {
    "input": str.strip,
    "outcome": str.strip,
    "treatment": str.strip,
    "confounders": _list,
    "heterogeneity": _list,
    "folds": int,
    "num_trees": int,
    "mtry": _optional(int),
    "min_leaf": int,
    "subsample_fraction": float,
    "honesty_fraction": float,
    "propensity_min_leaf": int,
    "tune": _bool,
    "trim": _optional(float),
    "contrasts": _contrasts,
    "atet": _bool,
    "gate": _gate,
    "gate_grid_points": int,
    "iate": lambda v: tuple(s.upper() for s in _list(v)),
    "iate_variant": lambda v: v.strip().lower(),
    "classification": _bool,
    "policy_depths": lambda v: tuple(int(s) for s in _list(v)),
    "policy_features": _groups,
    "policy_max_values": _optional(int),
    "policy_max_values_depth3": _optional(int),
    "seed": int,
    "out": str.strip,
}


def parse_pairs(lines, source: str = "config") -> dict:
    """Parse ``key = value`` lines into typed values; ``#`` starts a comment."""
    values = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}, line {no}: expected key = value")
        if key not in _PARSERS:
            raise ConfigError(f"{source}, line {no}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}, line {no}: bad value for {key!r}: {exc}") from None
    return values


def parse_config_text(text: str, overrides=(), base_dir: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from config text plus ``key=value``
    overrides. Relative ``input`` and ``out`` paths from the text are
    resolved against ``base_dir``; overrides are taken as given."""
    values = parse_pairs(text.splitlines())
    if base_dir is not None:
        for key in ("input", "out"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    values.update(parse_pairs(overrides, "override"))
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), overrides, path.parent)
