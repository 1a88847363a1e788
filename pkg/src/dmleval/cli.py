"""Command-line driver: ``dmleval <command> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import SyntheticSpec, generate_synthetic, write_csv
from .diagnostics import run_battery
from .exceptions import DmlError, StageError
from .pipeline import Artifacts, RunContext, run_pipeline, run_stage

THREADS_ENV = "DMLEVAL_THREADS"

# stages each subcommand runs
_COMMAND_STAGES = {
    "fit-nuisance": ("nuisance",),
    "effects": ("effects",),
    "gate": ("gate",),
    "iate": ("iate",),
    "policy": ("policy",),
}


def resolve_threads(value: int | None) -> int:
    """``--threads`` if given, else the environment variable, else 1."""
    if value is not None:
        threads = value
    else:
        raw = os.environ.get(THREADS_ENV, "").strip()
        try:
            threads = int(raw) if raw else 1
        except ValueError:
            raise DmlError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise DmlError("thread count must be at least 1")
    return threads


def _common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmleval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="draw a synthetic dataset with known effects")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=SyntheticSpec.n)
    p.add_argument("--effects", help="comma-separated effect expression per arm, e.g. '0,0.5+x1,1'")
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")

    for name, help_text in [
        ("run", "run every stage"),
        ("fit-nuisance", "cross-fit outcome and propensity forests"),
        ("effects", "APO, ATE and ATET tables from fitted nuisances"),
        ("gate", "group effects from the stored scores"),
        ("iate", "individualised effects and the classification table"),
        ("policy", "policy trees, shares and cross-validated tests"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "policy":
            p.add_argument("--depth", type=int, action="append",
                           help="tree depth to fit (repeatable; default from config)")

    p = sub.add_parser("verify", help="orthogonality and double robustness checks")
    p.add_argument("--out", help="directory for verify.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-mc", type=int, default=1_000_000)
    p.add_argument("--n-ident", type=int, default=20_000)
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if getattr(args, "depth", None):
        overrides.append("policy_depths=" + ",".join(map(str, args.depth)))
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
        spec = SyntheticSpec.from_dict({**spec.to_dict(), "n": args.n}) if args.n != SyntheticSpec.n else spec
    else:
        kw = {"n": args.n}
        if args.effects:
            effects = tuple(e.strip() for e in args.effects.split(","))
            if len(effects) != SyntheticSpec.n_arms:
                raise DmlError("--effects needs one expression per arm of the default design "
                               f"({SyntheticSpec.n_arms}); use --spec for other designs")
            kw["effects"] = effects
        spec = SyntheticSpec(**kw)
    ds, truth = generate_synthetic(spec, args.seed)
    art = Artifacts(args.out)
    roles = write_csv(ds, art.path("data.csv"))
    art.files["data.csv"] = "synth"
    art.write_text("truth.json", truth.to_json() + "\n", "synth")
    cfg = "\n".join([
        "input = data.csv",
        f"outcome = {roles.outcome}",
        f"treatment = {roles.treatment}",
        f"confounders = {','.join(roles.confounders)}",
        f"heterogeneity = {','.join(roles.heterogeneity)}",
        # CSV codes follow first appearance, so name the control arm explicitly
        "contrasts = " + ", ".join(f"{w}:0" for w in range(1, spec.n_arms)),
        f"seed = {args.seed}",
        "policy_features = x1,x2",
        "policy_depths = 1,2",
        "out = results",
    ]) + "\n"
    art.write_text("dmleval.cfg", cfg, "synth")
    art.finish_stage("synth")
    art.write_manifest("partial")
    print(f"wrote {art.path('data.csv')} ({ds.n} rows, {ds.n_arms} arms)")
    return 0


def cmd_verify(args) -> int:
    rows = run_battery(seed=args.seed, n_mc=args.n_mc, n_ident=args.n_ident)
    for r in rows:
        what = r.get("scenario") or "orthogonality"
        print(f"{'PASS' if r['ok'] else 'FAIL'}  {r['check']:<22} {r['score']:<4} {what}")
    if args.out:
        art = Artifacts(args.out)
        art.write_json("verify.json", rows, "verify")
        art.finish_stage("verify")
        art.write_manifest("partial")
    return 0 if all(r["ok"] for r in rows) else 1


def cmd_stages(args) -> int:
    cfg = _config(args)
    threads = resolve_threads(args.threads)
    if args.command == "run":
        art = run_pipeline(cfg, n_jobs=threads)
    else:
        art = Artifacts(cfg.out, cfg)
        ctx = RunContext(cfg, threads)
        for stage in _COMMAND_STAGES[args.command]:
            run_stage(stage, ctx, art)
    print(f"wrote {art.manifest_path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_stages(args)
    except StageError as exc:
        print(f"dmleval: {exc}", file=sys.stderr)
        return 1
    except DmlError as exc:
        print(f"dmleval: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
