"""Stage-wise evaluation pipeline writing CSV/JSON artifacts.

Stages run in the order of :data:`STAGES`. Each reads what it needs from
the run context or, when started on its own, from the artifacts of the
stages before it. Every written file is listed in ``MANIFEST.json``; a
failed stage leaves the manifest marked ``incomplete`` with its name.
Nothing time- or host-dependent is written, so identical configurations
give byte-identical outputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig
from .data import Dataset, FoldAssignment, assign_folds, load_csv
from .exceptions import ConfigError, MissingArtifactError, StageError
from .hetero import (
    classification_analysis,
    dr_learner_full,
    gate_kernel,
    gate_ols,
    gate_series,
    iate_crossfit,
    ndr_learner_full,
)
from .nuisance import NuisanceEstimates, crossfit, propensity_summary
from .policy import cross_validate_policy, evaluate_policy, policy_agreement, search_exact
from .scores import ScoreSet, apo_scores, apo_table, ate_scores, ate_table, atet_table, default_contrasts

__all__ = ["Artifacts", "RunContext", "STAGES", "run_pipeline", "run_stage"]

FLOAT_FORMAT = "%.17g"
STAGES = ("nuisance", "effects", "gate", "iate", "policy", "diagnostics")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Artifacts:
    """Writes files into ``out`` and keeps ``MANIFEST.json`` in step."""

    def __init__(self, out, config: RunConfig | None = None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.manifest_path = self.out / "MANIFEST.json"
        self.files: dict[str, str] = {}
        self.stages: list[str] = []
        if self.manifest_path.is_file():
            old = json.loads(self.manifest_path.read_text())
            self.files = dict(old.get("files", {}))
            self.stages = list(old.get("stages", []))

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise MissingArtifactError(f"required artifact {p} not found; run '{producer}' first")
        return p

    def _record(self, name: str, stage: str):
        self.files[name] = stage

    def write_csv(self, name: str, frame: pd.DataFrame, stage: str):
        frame.to_csv(self.path(name), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._record(name, stage)

    def write_json(self, name: str, obj, stage: str):
        text = json.dumps(_clean(obj), indent=2, allow_nan=False)
        self.path(name).write_text(text + "\n", encoding="utf-8")
        self._record(name, stage)

    def write_text(self, name: str, text: str, stage: str):
        self.path(name).write_text(text, encoding="utf-8")
        self._record(name, stage)

    def finish_stage(self, stage: str):
        if stage not in self.stages:
            self.stages.append(stage)

    def write_manifest(self, status: str, failed_stage: str | None = None, error: str | None = None):
        manifest = {
            "package": "dmleval",
            "version": __version__,
            "status": status,
            "stages": self.stages,
            "failed_stage": failed_stage,
            "error": error,
            "files": dict(sorted(self.files.items())),
        }
        if self.config is not None:
            manifest["config"] = self.config.to_dict()
        self.manifest_path.write_text(json.dumps(_clean(manifest), indent=2) + "\n", encoding="utf-8")


@dataclass
class RunContext:
    config: RunConfig
    n_jobs: int | None = None
    ds: Dataset | None = None
    folds: FoldAssignment | None = None
    nuisance: NuisanceEstimates | None = None
    scores: ScoreSet | None = None
    iate: dict = field(default_factory=dict)

    def dataset(self) -> Dataset:
        if self.ds is None:
            cfg = self.config
            if not cfg.input:
                raise ConfigError("no input file configured")
            if not Path(cfg.input).is_file():
                raise MissingArtifactError(f"input file {cfg.input} not found")
            self.ds = load_csv(cfg.input, cfg.roles)
            for col in cfg.referenced_columns():
                self.ds.z_columns([col])
        return self.ds

    def contrasts(self) -> list[tuple[int, int]]:
        ds = self.dataset()
        if self.config.contrasts is None:
            return default_contrasts(ds.n_arms)
        mapping = ds.label_mapping()
        pairs = []
        for a, b in self.config.contrasts:
            for lab in (a, b):
                if lab not in mapping:
                    raise ConfigError(f"contrast refers to unknown treatment label {lab!r}")
            if a == b:
                raise ConfigError(f"contrast {a}:{b} compares an arm with itself")
            pairs.append((mapping[a], mapping[b]))
        return pairs

    def label(self, w: int) -> str:
        return str(self.dataset().labels[w])

    def contrast_name(self, w: int, w_ref: int) -> str:
        return f"{self.label(w)}_vs_{self.label(w_ref)}"


# -- stages -------------------------------------------------------------------


def _load_nuisance(ctx: RunContext, art: Artifacts):
    if ctx.nuisance is None:
        path = art.require("nuisance.csv", "fit-nuisance")
        ctx.nuisance = NuisanceEstimates.from_csv(path, ctx.config.seed)
        ds = ctx.dataset()
        if ctx.nuisance.mu_hat.shape != (ds.n, ds.n_arms):
            raise MissingArtifactError(f"{path} does not match the input data; rerun 'fit-nuisance'")
        ctx.folds = ctx.nuisance.folds
    return ctx.nuisance


def _load_scores(ctx: RunContext, art: Artifacts) -> ScoreSet:
    if ctx.scores is None:
        path = art.require("scores.csv", "effects")
        frame = pd.read_csv(path, float_precision="round_trip")
        ctx.scores = ScoreSet(frame[[c for c in frame.columns if c.startswith("gamma_")]].to_numpy())
    return ctx.scores


def stage_nuisance(ctx: RunContext, art: Artifacts):
    cfg, ds = ctx.config, ctx.dataset()
    ctx.folds = assign_folds(ds, cfg.folds, cfg.seed)
    ctx.nuisance = crossfit(ds, ctx.folds, cfg.forest_params(), cfg.trim,
                            cfg.propensity_params(), n_jobs=ctx.n_jobs)
    art.write_csv("nuisance.csv", ctx.nuisance.to_frame(), "nuisance")
    summary = propensity_summary(ctx.nuisance.e_hat, ds.labels)
    summary.insert(0, "statistic", summary.index)
    summary.columns = ["statistic"] + [f"e_{lab}" for lab in ds.labels]
    art.write_csv("propensity_summary.csv", summary, "nuisance")


def stage_effects(ctx: RunContext, art: Artifacts):
    ds = ctx.dataset()
    nu = _load_nuisance(ctx, art)
    ctx.scores = apo_scores(ds, nu)
    frame = pd.DataFrame({f"gamma_{w}": ctx.scores.gamma[:, w] for w in range(ds.n_arms)})
    art.write_csv("scores.csv", frame, "effects")
    labels = list(ds.labels)
    pairs = ctx.contrasts()

    def table(rows):
        return pd.DataFrame([{
            "estimand": r["estimand"], "arms": " vs ".join(map(str, r["arms"])),
            "point": r["point"], "se": r["se"], "t": r["t"], "p": r["p"], "n": r["n"],
        } for r in rows])

    rows = {"apo": apo_table(ctx.scores, labels), "ate": ate_table(ctx.scores, pairs, labels)}
    if ctx.config.atet:
        rows["atet"] = atet_table(ds, nu, pairs)
    for name, r in rows.items():
        art.write_csv(f"{name}.csv", table(r), "effects")
    art.write_json("effects.json", [row for r in rows.values() for row in r], "effects")


def _curve_grid(z: np.ndarray, points: int) -> np.ndarray:
    values = np.unique(z)
    if values.size <= points:
        return values
    return np.linspace(values[0], values[-1], points)


def stage_gate(ctx: RunContext, art: Artifacts):
    cfg, ds = ctx.config, ctx.dataset()
    if not cfg.gate:
        return
    scores = _load_scores(ctx, art)
    for w, w_ref in ctx.contrasts():
        delta = ate_scores(scores, w, w_ref).delta
        tag = ctx.contrast_name(w, w_ref)
        for spec in cfg.gate:
            z = ds.z_columns(spec.columns)
            base = f"gate_{spec.name}_{tag}"
            if spec.method == "ols":
                table = gate_ols(delta, z, list(spec.columns))
                art.write_json(base + ".json", table.to_dict(), "gate")
                continue
            grid = _curve_grid(z[:, 0], cfg.gate_grid_points)
            fitter = gate_kernel if spec.method == "kernel" else gate_series
            curve = fitter(delta, z[:, 0], grid)
            art.write_csv(base + ".csv", pd.DataFrame(
                {"grid": curve.grid, "estimate": curve.tau_hat, "se": curve.se}), "gate")
            art.write_json(base + ".json", {"method": spec.method, "column": spec.columns[0],
                                            "contrast": tag, **curve.description}, "gate")


def stage_iate(ctx: RunContext, art: Artifacts):
    cfg, ds = ctx.config, ctx.dataset()
    if not cfg.iate:
        return
    columns = {}
    flags = {}
    for w, w_ref in ctx.contrasts():
        tag = ctx.contrast_name(w, w_ref)
        if cfg.iate_variant == "crossfit":
            res = iate_crossfit(ds, w, w_ref, cfg.final_params(), cfg.propensity_params(),
                                cfg.final_params(), seed=cfg.seed, learners=cfg.iate, n_jobs=ctx.n_jobs)
        else:
            nu = _load_nuisance(ctx, art)
            res = {}
            if "DR" in cfg.iate:
                res["DR"] = dr_learner_full(ds, nu, w, w_ref, cfg.final_params())
            if "NDR" in cfg.iate:
                res["NDR"] = ndr_learner_full(ds, nu, w, w_ref, cfg.final_params())
        for learner in cfg.iate:
            columns[f"{learner}_{tag}"] = res[learner].tau_hat
            if res[learner].fallback is not None:
                flags[f"{learner}_{tag}"] = int(res[learner].fallback.sum())
            ctx.iate[(learner, w, w_ref)] = res[learner]
    frame = pd.DataFrame(columns)
    art.write_csv("iate.csv", frame, "iate")
    summary = frame.describe().T.reset_index().rename(columns={"index": "column"})
    art.write_csv("iate_summary.csv", summary, "iate")
    art.write_json("iate_meta.json", {"variant": cfg.iate_variant, "ndr_fallback_points": flags}, "iate")
    if cfg.classification:
        table = classification_analysis(frame.to_numpy(), ds.x, ds.x_names, list(frame.columns))
        table.insert(0, "covariate", table.index)
        art.write_csv("classification.csv", table, "iate")


def stage_policy(ctx: RunContext, art: Artifacts):
    cfg, ds = ctx.config, ctx.dataset()
    if not cfg.policy_depths:
        return
    scores = _load_scores(ctx, art)
    folds = _load_nuisance(ctx, art).folds
    subsets = cfg.policy_features or (tuple(ds.z_names),)
    rows, cv_rows = [], []
    for k, features in enumerate(subsets):
        z = ds.z_columns(features)
        for depth in cfg.policy_depths:
            max_values = cfg.policy_max_values
            if depth == 3 and max_values is None:
                max_values = cfg.policy_max_values_depth3
            tree = search_exact(scores, z, depth, max_values=max_values)
            value = evaluate_policy(scores, z, tree)
            cv = cross_validate_policy(ds, scores, z, depth, folds, max_values=max_values)
            agreement = [policy_agreement(tree, t, z) for t in cv.trees]
            name = f"policy_set{k}_depth{depth}"
            art.write_json(name + ".json", {
                "features": list(features), "depth": depth, "max_values": max_values,
                "tree": tree.to_dict(), "value": value.to_dict([str(l) for l in ds.labels]),
                "cv_test": cv.to_rows(), "cv_trees": [t.to_dict() for t in cv.trees],
                "agreement": agreement, "mean_agreement": float(np.mean(agreement)),
            }, "policy")
            art.write_text(name + ".txt", tree.render(list(features), list(ds.labels)) + "\n", "policy")
            row = {"set": k, "features": " ".join(features), "depth": depth,
                   "value": value.value, "se": value.se}
            row.update({f"share_{lab}": s for lab, s in zip(ds.labels, value.shares)})
            row["mean_agreement"] = float(np.mean(agreement))
            rows.append(row)
            for r in cv.to_rows():
                cv_rows.append({"set": k, "depth": depth, **r})
    art.write_csv("policy_shares.csv", pd.DataFrame(rows), "policy")
    art.write_csv("policy_cv.csv", pd.DataFrame(cv_rows), "policy")


def stage_diagnostics(ctx: RunContext, art: Artifacts):
    ds = ctx.dataset()
    nu = _load_nuisance(ctx, art)
    fallback = {f"{l}_{ctx.contrast_name(w, v)}": int(r.fallback.sum())
                for (l, w, v), r in ctx.iate.items() if r.fallback is not None}
    art.write_json("diagnostics.json", {
        "n": ds.n,
        "arm_counts": {str(l): int(c) for l, c in zip(ds.labels, ds.arm_counts)},
        "folds": int(nu.folds.K),
        "fold_sizes": nu.folds.sizes(),
        "min_propensity": {str(l): float(nu.e_hat[:, w].min()) for w, l in enumerate(ds.labels)},
        "trim_threshold": ctx.config.trim,
        "trim_flagged": int(nu.trim_flag.sum()),
        "ndr_fallback_points": fallback,
    }, "diagnostics")


_STAGE_FUNCS = {
    "nuisance": stage_nuisance,
    "effects": stage_effects,
    "gate": stage_gate,
    "iate": stage_iate,
    "policy": stage_policy,
    "diagnostics": stage_diagnostics,
}


def run_stage(name: str, ctx: RunContext, art: Artifacts):
    """Run one stage, wrapping any failure in :class:`StageError` and
    marking the manifest incomplete."""
    try:
        _STAGE_FUNCS[name](ctx, art)
    except Exception as exc:
        art.write_manifest("incomplete", name, str(exc))
        raise StageError(name, exc) from exc
    art.finish_stage(name)
    art.write_manifest("complete" if set(STAGES) <= set(art.stages) else "partial")


def run_pipeline(config: RunConfig, n_jobs: int | None = None, out=None) -> Artifacts:
    """Run every stage in order; returns the artifact writer."""
    art = Artifacts(out or config.out, config)
    for name, stage in list(art.files.items()):
        if stage in STAGES:
            art.path(name).unlink(missing_ok=True)
            del art.files[name]
    art.stages = [s for s in art.stages if s not in STAGES]
    ctx = RunContext(config, n_jobs)
    try:
        ctx.dataset()
    except Exception as exc:
        art.write_manifest("incomplete", "load", str(exc))
        raise StageError("load", exc) from exc
    for name in STAGES:
        run_stage(name, ctx, art)
    return art
