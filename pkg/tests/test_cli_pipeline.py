import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from dmleval.cli import main, resolve_threads
from dmleval.config import GateSpec, RunConfig, load_config, parse_config_text
from dmleval.exceptions import ConfigError, DmlError, MissingArtifactError, StageError
from dmleval.pipeline import Artifacts, RunContext, run_pipeline, run_stage

FAST = ["--set", "num_trees=20", "--set", "folds=3"]


def _manifest(out):
    return json.loads((Path(out) / "MANIFEST.json").read_text())


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--seed", "4", "--n", "600"]) == 0
    return d


@pytest.fixture(scope="module")
def full_run(synth_dir):
    cfg = synth_dir / "dmleval.cfg"
    sets = FAST + ["--set", "gate=ols:x1,x2; kernel:x1; series:x2", "--set", "iate=DR,NDR"]
    assert main(["run", "--config", str(cfg), *sets]) == 0
    return synth_dir / "results", sets


# -- config -------------------------------------------------------------------


def test_config_parsing(tmp_path):
    text = """
    # comment
    input = data.csv
    confounders = x1, x2
    heterogeneity = x1
    gate = ols:x1,x2; kernel:x1
    policy_features = x1,x2; x1
    contrasts = 1:0, b:a
    trim = none
    tune = yes
    """
    cfg = parse_config_text(text, ["seed=9", "out=/abs/out"], base_dir=tmp_path)
    assert cfg.input == str(tmp_path / "data.csv")
    assert cfg.out == "/abs/out" and cfg.seed == 9
    assert cfg.gate == (GateSpec("ols", ("x1", "x2")), GateSpec("kernel", ("x1",)))
    assert cfg.policy_features == (("x1", "x2"), ("x1",))
    assert cfg.contrasts == ((1, 0), ("b", "a"))
    assert cfg.trim is None and cfg.tune
    assert isinstance(cfg.forest_params(), list)
    assert cfg.referenced_columns() == ["x1", "x2"]


@pytest.mark.parametrize("text", [
    "bogus = 1", "folds = 1", "policy_depths = 4", "gate = kernel:x1,x2", "gate = knn:x1",
    "iate = XL", "folds = many", "no equals sign",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
    assert main(["effects", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_threads(monkeypatch):
    monkeypatch.delenv("DMLEVAL_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("DMLEVAL_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("DMLEVAL_THREADS", "x")
    with pytest.raises(DmlError):
        resolve_threads(None)
    with pytest.raises(DmlError):
        resolve_threads(0)


# -- synth and run ------------------------------------------------------------


def test_synth_outputs(synth_dir):
    for name in ("data.csv", "truth.json", "dmleval.cfg", "MANIFEST.json"):
        assert (synth_dir / name).is_file()
    frame = pd.read_csv(synth_dir / "data.csv")
    assert len(frame) == 600
    assert "synth" in _manifest(synth_dir)["stages"]


def test_synth_effects_arity(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--effects", "0,1"]) == 2


def test_full_run_artifacts(full_run):
    out, _ = full_run
    m = _manifest(out)
    assert m["status"] == "complete" and m["failed_stage"] is None
    for name, stage in m["files"].items():
        path = out / name
        assert path.is_file(), name
        if name.endswith(".json"):
            json.loads(path.read_text())
        elif name.endswith(".csv"):
            pd.read_csv(path)
    names = set(m["files"])
    assert {"apo.csv", "ate.csv", "atet.csv", "iate.csv", "classification.csv",
            "policy_shares.csv", "policy_cv.csv", "diagnostics.json"} <= names
    assert "gate_ols_x1_x2_1_vs_0.json" in names
    assert "gate_kernel_x1_2_vs_0.csv" in names and "gate_series_x2_2_vs_0.csv" in names
    assert {"policy_set0_depth1.json", "policy_set0_depth2.txt"} <= names
    ate = pd.read_csv(out / "ate.csv")
    assert ate["arms"].tolist() == ["1 vs 0", "2 vs 0"]
    iate = pd.read_csv(out / "iate.csv")
    assert list(iate.columns) == ["DR_1_vs_0", "NDR_1_vs_0", "DR_2_vs_0", "NDR_2_vs_0"]


def test_rerun_is_byte_identical(full_run, tmp_path):
    out, sets = full_run
    cfg = out.parent / "dmleval.cfg"
    other = tmp_path / "again"
    assert main(["run", "--config", str(cfg), *sets, "--out", str(other)]) == 0
    a, b = _manifest(out), _manifest(other)
    assert a["files"] == b["files"]
    for name in a["files"]:
        assert (out / name).read_bytes() == (other / name).read_bytes(), name


def test_stagewise_reproduces_run(full_run, tmp_path):
    out, sets = full_run
    cfg = out.parent / "dmleval.cfg"
    step = tmp_path / "steps"
    assert main(["fit-nuisance", "--config", str(cfg), *sets, "--out", str(step)]) == 0
    assert _manifest(step)["status"] == "partial"
    assert main(["effects", "--config", str(cfg), *sets, "--out", str(step)]) == 0
    for name in ("nuisance.csv", "scores.csv", "apo.csv", "ate.csv", "atet.csv"):
        assert (step / name).read_bytes() == (out / name).read_bytes(), name
    assert main(["policy", "--config", str(cfg), *sets, "--out", str(step), "--depth", "1"]) == 0
    tree = json.loads((step / "policy_set0_depth1.json").read_text())["tree"]
    assert tree == json.loads((out / "policy_set0_depth1.json").read_text())["tree"]
    assert not (step / "policy_set0_depth2.json").exists()
    assert main(["gate", "--config", str(cfg), *sets, "--out", str(step)]) == 0
    name = "gate_ols_x1_x2_1_vs_0.json"
    assert (step / name).read_bytes() == (out / name).read_bytes()


def test_missing_artifact_names_file(synth_dir, tmp_path, capsys):
    cfg = synth_dir / "dmleval.cfg"
    empty = tmp_path / "empty"
    code = main(["effects", "--config", str(cfg), *FAST, "--out", str(empty)])
    assert code == 1
    assert "nuisance.csv" in capsys.readouterr().err
    m = _manifest(empty)
    assert m["status"] == "incomplete" and m["failed_stage"] == "effects"
    config = load_config(cfg, ["out=" + str(empty)])
    with pytest.raises(MissingArtifactError, match="scores.csv"):
        Artifacts(empty, config).require("scores.csv", "effects")


def test_failed_stage_marks_manifest(synth_dir, tmp_path):
    cfg = load_config(synth_dir / "dmleval.cfg", ["num_trees=10", "folds=3", "gate=ols:x1",
                                                  "policy_depths=", "out=" + str(tmp_path / "o")])
    bad = cfg.replace(gate=(GateSpec("ols", ("x1", "x1")),))
    with pytest.raises(StageError) as info:
        run_pipeline(bad)
    assert info.value.stage == "gate"
    m = _manifest(tmp_path / "o")
    assert m["status"] == "incomplete" and m["failed_stage"] == "gate"
    assert {"nuisance", "effects"} <= set(m["stages"])
    assert (tmp_path / "o" / "ate.csv").is_file()


def test_unknown_column_fails_at_load(synth_dir, tmp_path):
    cfg = load_config(synth_dir / "dmleval.cfg", ["policy_features=nope", "out=" + str(tmp_path)])
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "load"


def test_empty_lists_give_average_tables_only(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "6", "--n", "2000",
                 "--effects", "0,0,0"]) == 0
    assert main(["run", "--config", str(tmp_path / "dmleval.cfg"), "--set", "num_trees=50",
                 "--set", "policy_depths=", "--set", "gate=", "--set", "iate="]) == 0
    out = tmp_path / "results"
    names = set(_manifest(out)["files"])
    assert not any(n.startswith(("gate_", "iate", "policy", "classification")) for n in names)
    assert {"apo.csv", "ate.csv", "atet.csv"} <= names
    ate = pd.read_csv(out / "ate.csv")
    assert np.all(np.abs(ate["point"]) < 3 * ate["se"])


def test_full_variant_iate(synth_dir, tmp_path):
    cfg = load_config(synth_dir / "dmleval.cfg", ["num_trees=10", "folds=3", "iate=NDR",
                                                  "iate_variant=full", "policy_depths=",
                                                  "contrasts=2:1", "out=" + str(tmp_path)])
    run_pipeline(cfg)
    frame = pd.read_csv(tmp_path / "iate.csv")
    assert list(frame.columns) == ["NDR_2_vs_1"]
    assert pd.read_csv(tmp_path / "ate.csv")["arms"].tolist() == ["2 vs 1"]


def test_bad_contrast_label(synth_dir, tmp_path):
    cfg = load_config(synth_dir / "dmleval.cfg", ["contrasts=7:0", "num_trees=5", "out=" + str(tmp_path)])
    ctx = RunContext(cfg)
    with pytest.raises(ConfigError):
        ctx.contrasts()


def test_verify_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["verify", "--n-mc", "100000", "--out", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert (tmp_path / "verify.json").is_file()
    import dmleval.cli as cli
    monkeypatch.setattr(cli, "run_battery", lambda **kw: [
        {"ok": False, "check": "neyman_orthogonality", "score": "dr"}])
    assert main(["verify"]) == 1
