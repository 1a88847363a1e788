import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmleval.data import (
    ColumnRoles,
    Dataset,
    GroundTruth,
    SyntheticSpec,
    assign_folds,
    check_support,
    evaluate_expression,
    generate_synthetic,
    load_csv,
    standardize,
    write_csv,
)
from dmleval.exceptions import ParseError, SchemaError, SupportError, ValidationError

ROLES = ColumnRoles("y", "w", ("x1",))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_reencodes_by_first_appearance(tmp_path):
    p = _write(tmp_path, "y,w,x1\n1.0,0,0.1\n2.0,2,0.2\n3.0,0,0.3\n")
    ds = load_csv(p, ROLES)
    assert ds.w.tolist() == [0, 1, 0]
    assert ds.n_arms == 2
    assert ds.label_mapping() == {0: 0, 2: 1}


def test_load_csv_first_appearance_not_sorted(tmp_path):
    p = _write(tmp_path, "y,w,x1\n1,b,0\n2,a,1\n3,b,2\n")
    ds = load_csv(p, ROLES)
    assert ds.labels == ("b", "a")
    assert ds.w.tolist() == [0, 1, 0]


def test_load_csv_nan_cites_row(tmp_path):
    rows = "".join(f"{i}.0,{i % 2},{i}\n" for i in range(1, 5))
    p = _write(tmp_path, "y,w,x1\n" + rows + "nan,1,5\n")
    with pytest.raises(ParseError, match="row 5"):
        load_csv(p, ROLES)


def test_load_csv_missing_and_non_numeric(tmp_path):
    with pytest.raises(ParseError, match="row 2, column 'x1'"):
        load_csv(_write(tmp_path, "y,w,x1\n1,0,1\n2,1,\n"), ROLES)
    with pytest.raises(ParseError, match="non-numeric"):
        load_csv(_write(tmp_path, "y,w,x1\n1,0,1\n2,1,abc\n"), ROLES)


def test_load_csv_one_arm(tmp_path):
    with pytest.raises(ValidationError, match="need >= 2 arms"):
        load_csv(_write(tmp_path, "y,w,x1\n1,0,1\n2,0,2\n"), ROLES)


def test_load_csv_missing_column(tmp_path):
    with pytest.raises(SchemaError, match="x2"):
        load_csv(_write(tmp_path, "y,w,x1\n1,0,1\n2,1,2\n"), ColumnRoles("y", "w", ("x1", "x2")))


def test_roles_validation():
    with pytest.raises(SchemaError):
        ColumnRoles("y", "w", ())
    with pytest.raises(SchemaError):
        ColumnRoles("y", "y", ("x1",))


def test_csv_round_trip_bit_identical(tmp_path, small_data):
    ds, _ = small_data
    roles = write_csv(ds, tmp_path / "a.csv")
    back = load_csv(tmp_path / "a.csv", roles)
    roles2 = write_csv(back, tmp_path / "b.csv")
    again = load_csv(tmp_path / "b.csv", roles2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for a, b in [(back.y, again.y), (back.x, again.x), (back.z, again.z)]:
        assert np.array_equal(a, b)
    # first load keeps the values, codes follow first appearance
    assert np.array_equal(back.y, ds.y) and np.array_equal(back.x, ds.x)
    labels = np.array(back.labels)[back.w]
    assert np.array_equal(labels, ds.w)


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        Dataset([1.0, np.nan], [0, 1], [[0.0], [1.0]], [[0.0], [1.0]])
    with pytest.raises(ValidationError, match="zero observations"):
        Dataset([1.0, 2.0], [0, 2], [[0.0], [1.0]], [[0.0], [1.0]])
    with pytest.raises(ValidationError, match="row counts"):
        Dataset([1.0, 2.0], [0, 1], [[0.0]], [[0.0], [1.0]])
    ds = Dataset([1.0, 2.0, 3.0], [0, 1, 1], [[0.0], [1.0], [2.0]], [[0.0], [1.0], [2.0]])
    assert ds.arm_counts.tolist() == [1, 2]
    with pytest.raises(ValueError):
        ds.y[0] = 5.0


def test_folds_single_arm_equal_split():
    folds = assign_folds(np.zeros(10, dtype=int), 5, seed=1)
    assert folds.sizes().tolist() == [2] * 5


def test_folds_stratified():
    w = np.array([0] * 6 + [1] * 4)
    folds = assign_folds(w, 2, seed=3)
    for k in range(2):
        members = w[folds.test_index(k)]
        assert (members == 0).sum() == 3 and (members == 1).sum() == 2


def test_folds_deterministic_and_errors(small_data):
    ds, _ = small_data
    a = assign_folds(ds, 5, 7)
    b = assign_folds(ds, 5, 7)
    assert np.array_equal(a.fold_id, b.fold_id)
    assert not np.array_equal(a.fold_id, assign_folds(ds, 5, 8).fold_id)
    with pytest.raises(ValueError, match="arm 1"):
        assign_folds(np.array([0, 0, 0, 1, 1]), 3, 0)
    with pytest.raises(ValueError):
        assign_folds(ds, 1, 0)


@settings(max_examples=60, deadline=None)
@given(
    counts=st.lists(st.integers(min_value=3, max_value=40), min_size=2, max_size=4),
    K=st.integers(min_value=2, max_value=3),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_folds_partition_property(counts, K, seed):
    w = np.repeat(np.arange(len(counts)), counts)
    folds = assign_folds(w, K, seed)
    seen = np.concatenate([folds.test_index(k) for k in range(K)])
    assert np.array_equal(np.sort(seen), np.arange(w.size))
    sizes = folds.sizes()
    assert sizes.max() - sizes.min() <= 1
    for arm in range(len(counts)):
        per = np.bincount(folds.fold_id[w == arm], minlength=K)
        assert per.max() - per.min() <= 1


def test_standardize_examples():
    s = standardize(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    assert np.allclose(s.values[:, 0], [-1.0, 0.0, 1.0])
    assert np.array_equal(s.values[:, 1], [5.0, 5.0, 5.0])
    assert s.constant.tolist() == [False, True]
    again = standardize(s.values[:, :1])
    assert np.max(np.abs(again.values - s.values[:, :1])) < 1e-12


def test_expression_grammar():
    x = np.array([[0.5, -0.25], [-1.0, 2.0]])
    assert np.allclose(evaluate_expression("x1+sq_x2", x), [0.5 + 0.0625, -1.0 + 4.0])
    assert np.allclose(evaluate_expression("2*abs_x1-1", x), [0.0, 1.0])
    assert np.allclose(evaluate_expression("step_x2", x), [0.0, 1.0])
    assert np.allclose(evaluate_expression("sin_x1", x), np.sin(np.pi * x[:, 0]))
    assert np.allclose(evaluate_expression("1e-3", x), 1e-3)
    assert np.array_equal(evaluate_expression("zero", x), [0.0, 0.0])
    with pytest.raises(ValueError):
        evaluate_expression("x9", x)


def test_synthetic_truth_cases():
    zero = SyntheticSpec(n=300, effects=("0", "0", "0"))
    _, truth = generate_synthetic(zero, 1)
    assert np.all(truth.ate == 0.0)
    const = SyntheticSpec(n=300, effects=("0", "0.7", "0"))
    _, truth = generate_synthetic(const, 1)
    assert truth.ate[1, 0] == pytest.approx(0.7, abs=1e-12)
    linear = SyntheticSpec(n=300, effects=("0", "x1", "0"))
    _, truth = generate_synthetic(linear, 1)
    assert abs(truth.ate[1, 0]) < 3e-3


def test_ground_truth_json_and_identity(small_data):
    _, truth = small_data
    assert np.array_equal(truth.ate, truth.apo[:, None] - truth.apo[None, :])
    back = GroundTruth.from_json(truth.to_json())
    assert np.array_equal(back.apo, truth.apo) and back.spec == truth.spec
    assert set(json.loads(truth.to_json())) == {"apo", "ate", "seed", "spec"}


def test_synthetic_deterministic_and_default_overlap():
    spec = SyntheticSpec(n=500)
    a, _ = generate_synthetic(spec, 4)
    b, _ = generate_synthetic(spec, 4)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.w, b.w)
    logits = np.asarray(spec.propensity_coef)
    assert np.max(np.abs(logits[:, 1:]).sum(axis=1)) == pytest.approx(1.5)
    assert check_support(spec) > 0.04


def test_support_error():
    coef = [[0.0] * 11, [12.0] + [0.0] * 10, [0.0] * 11]
    with pytest.raises(SupportError):
        generate_synthetic(SyntheticSpec(n=100, propensity_coef=coef), 0)


def test_subgroup_propensity():
    spec = SyntheticSpec(n=100, subgroup_propensity=(1, 0, 0.5, 0.02))
    x = np.array([[0.9] + [0.0] * 9, [0.1] + [0.0] * 9])
    e = spec.propensity(x)
    assert e[0, 1] == pytest.approx(0.02)
    assert np.allclose(e.sum(axis=1), 1.0)
    assert e[1, 1] != pytest.approx(0.02)
