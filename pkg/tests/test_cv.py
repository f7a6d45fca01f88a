import json
import math

import numpy as np
import pytest

from shiftadapt.data import GroupedDataset, SplitError, digest_ids
from shiftadapt.ensemble import LeakageError
from shiftadapt.evaluation.cv import (ALPHA_GRID, TRAIN_ALL, ExperimentSpec, FoldResult, MetricReport,
                                      audit_isolation, inner_folds, inner_select, nested_cv)
from shiftadapt.models.base import features_of
from shiftadapt.models.learners import LearnerSpec
from shiftadapt import preprocess
from shiftadapt.synth import Cluster, GroupSpec, ShiftSpec, generate, shift_pair_spec


@pytest.fixture(scope="module")
def data():
    return generate(shift_pair_spec(1.0, 150, 100, dims=4, seed=3))


def spec_for(fraction, policy="grid", **kw):
    return ExperimentSpec("classification", "group", "source", "target", fraction, alpha_policy=policy, **kw)


@pytest.fixture(scope="module")
def grid_reports(data):
    out = {}
    for f in (0.1, 0.2):
        s = spec_for(f)
        out[f] = (s, nested_cv(s, data))
    return out


def test_alpha_grid_contents():
    assert ALPHA_GRID == tuple(k / (k + 1) for k in range(1, 11))
    assert ALPHA_GRID[0] == 0.5 and ALPHA_GRID[-1] == pytest.approx(10 / 11)
    assert list(ALPHA_GRID) == sorted(ALPHA_GRID)


def test_zero_fraction_single_fold_on_all_target(data):
    s = spec_for(0.0, "fixed")
    r = nested_cv(s, data)
    assert len(r.folds) == 1
    f = r.folds[0]
    assert (f.n_train_source, f.n_train_target, f.n_test) == (150, 0, 100)
    assert f.alpha == 0.0 and f.inner_scores == ()
    assert audit_isolation(r, s, data) == 1


def test_point_two_uses_whole_outer_fold(grid_reports):
    s, r = grid_reports[0.2]
    assert len(r.folds) == 5
    for f in r.folds:
        assert f.n_train_source == 150
        assert f.n_train_target == 20 and f.n_test == 80
        assert f.alpha in ALPHA_GRID
        assert len(f.inner_scores) == len(ALPHA_GRID)
        assert f.alpha == f.inner_scores[int(np.argmax([x[2] for x in f.inner_scores]))][0]


def test_point_one_strict_leaves_half_fold_unused(grid_reports, data):
    s, r = grid_reports[0.1]
    for f in r.folds:
        assert f.n_train_target == 10 and f.n_test == 80
    assert audit_isolation(r, s, data) == 5


def test_point_one_relaxed_tests_on_everything_else(data):
    s = spec_for(0.1, "fixed", alpha=0.8, strict_paper_splits=False)
    r = nested_cv(s, data)
    assert all(f.n_train_target == 10 and f.n_test == 90 for f in r.folds)
    assert all(f.alpha == 0.8 for f in r.folds)
    assert audit_isolation(r, s, data) == 5


def test_train_all_is_target_only(data):
    s = spec_for(TRAIN_ALL, "fixed")
    r = nested_cv(s, data)
    assert len(r.folds) == 5
    assert all(f.n_train_source == 0 and f.n_train_target == 80 and f.n_test == 20 for f in r.folds)
    assert all(f.alpha is None for f in r.folds)
    assert audit_isolation(r, s, data) == 5
    test_ids = [set(f.predictions) for f in r.folds]
    assert set().union(*test_ids) == {i for i in data.row_ids if i.startswith("target")}
    assert sum(len(t) for t in test_ids) == 100


def test_test_sets_partition_target_at_point_two(grid_reports, data):
    _, r = grid_reports[0.2]
    target = {i for i in data.row_ids if i.startswith("target")}
    for f in r.folds:
        assert set(f.predictions) <= target
        assert digest_ids(f.predictions) == f.test_digest


def test_theory_alpha_listed_first(data):
    s = spec_for(0.2, "theory")
    r = nested_cv(s, data)
    for f in r.folds:
        assert f.note.startswith("theory:")
        first = f.inner_scores[0][0]
        assert 0.0 <= first <= 1.0
        rest = [x[0] for x in f.inner_scores[1:]]
        assert first not in rest and set(rest) <= set(ALPHA_GRID)
        assert f.alpha in [first] + rest
    assert audit_isolation(r, s, data) == 5


def test_undefined_fold_recorded_and_excluded():
    spec = ShiftSpec(2, (GroupSpec("source", 80, weights=(1.0, 0.0)),
                         GroupSpec("target", 30, clusters=(Cluster(1.0, (0.5, 0.0)),))), seed=1)
    d = generate(spec)
    r = nested_cv(spec_for(0.0, "fixed"), d)
    assert r.folds[0].value is None
    assert "undefined" in r.undefined[0]
    assert r.values == [] and math.isnan(r.mean)


def test_mean_and_std_recomputable(grid_reports):
    _, r = grid_reports[0.2]
    v = [f.value for f in r.folds]
    assert r.mean == pytest.approx(sum(v) / len(v), abs=1e-12)
    sd = math.sqrt(sum((x - r.mean) ** 2 for x in v) / (len(v) - 1))
    assert r.std == pytest.approx(sd, abs=1e-12)
    d = json.loads(r.to_json())
    assert d["mean"] == r.mean and d["chosen_alpha"] == [f.alpha for f in r.folds]


def test_report_deterministic_and_parallel_safe(data):
    s = spec_for(0.2)
    a = nested_cv(s, data).to_json()
    assert nested_cv(s, data).to_json() == a
    assert nested_cv(s, data, jobs=2).to_json() == a


def test_report_json_round_trip(grid_reports):
    _, r = grid_reports[0.1]
    back = MetricReport.from_dict(json.loads(r.to_json(include_predictions=True)))
    assert back.to_json() == r.to_json()
    assert back.folds == r.folds


def test_csv_row(grid_reports):
    _, r = grid_reports[0.2]
    row = r.csv_row()
    assert row["source"] == "source" and row["target"] == "target"
    assert row["model"] == "linear" and row["metric"] == "auc" and row["n_folds"] == 5
    assert float(row["mean"]) == r.mean
    lines = r.to_csv().splitlines()
    assert lines[0].split(",") == list(MetricReport.CSV_FIELDS)
    assert len(lines) == 2


def test_compare_paired_folds(grid_reports):
    _, a = grid_reports[0.2]
    _, b = grid_reports[0.1]
    entry = a.compare("vs_point_one", b)
    assert entry["folds"] == [0, 1, 2, 3, 4]
    assert 0.0 <= entry["p_value"] <= 1.0
    assert a.comparisons["vs_point_one"] is entry


def test_tampered_report_fails_audit(grid_reports, data):
    s, r = grid_reports[0.2]
    bad = MetricReport.from_dict(json.loads(r.to_json(include_predictions=True)))
    f0 = bad.folds[0]
    bad.folds[0] = FoldResult(**{**f0.__dict__, "test_digest": digest_ids(["source-000000"])})
    with pytest.raises(LeakageError):
        audit_isolation(bad, s, data)
    bad.folds[0] = FoldResult(**{**f0.__dict__, "predictions": {**f0.predictions, "source-000000": 0.5}})
    with pytest.raises(LeakageError):
        audit_isolation(bad, s, data)


@pytest.mark.parametrize("kw", [
    dict(target_fraction=0.0, alpha_policy="grid"),
    dict(target_fraction=0.2, alpha_policy="fixed"),
    dict(target_fraction=0.2, alpha_policy="fixed", alpha=1.5),
    dict(target_fraction=0.3),
    dict(target_fraction=0.2, alpha_policy="bayes"),
    dict(target_fraction=0.2, outer_folds=1),
])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        ExperimentSpec("classification", "group", "source", "target", **kw)


def test_spec_round_trip():
    s = spec_for("train-all", "fixed", zoo=(LearnerSpec("linear"), LearnerSpec("knn", {"k": 5})))
    assert s.target_fraction == TRAIN_ALL and s.model_name == "ensemble"
    assert ExperimentSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_wrong_attribute_or_task_rejected(data):
    with pytest.raises(ValueError):
        nested_cv(ExperimentSpec("classification", "y", "0", "1", 0.2), data)
    with pytest.raises(ValueError):
        nested_cv(ExperimentSpec("regression", "group", "source", "target", 0.2), data)


def _train_block(data, n_target):
    pair = GroupedDataset.from_groups(data, "group", "source", "target")
    train = pair.source.concat(pair.target.take(np.arange(n_target)))
    p = preprocess.transform(preprocess.fit(train), train)
    is_t = np.r_[np.zeros(len(pair.source), bool), np.ones(n_target, bool)]
    return features_of(p), p.labels.astype(float), list(p.row_ids), is_t


def test_inner_folds_balance_target_rows(data):
    feats, y, ids, is_t = _train_block(data, 12)
    folds = inner_folds(ids, y, is_t, "classification", 5, 0)
    counts = np.bincount(folds[is_t], minlength=5)
    assert counts.max() - counts.min() <= 1


def test_inner_select_needs_target_rows_in_every_fold(data):
    feats, y, ids, is_t = _train_block(data, 12)
    folds = inner_folds(ids, y, is_t, "classification", 5, 0)
    folds[is_t] = 0
    with pytest.raises(SplitError):
        inner_select(spec_for(0.2), feats, y, ids, is_t, folds, [(0.5, {})], 0)


def test_regression_reports_mae():
    d = generate(shift_pair_spec(0.5, 120, 60, dims=3, task="regression", seed=2))
    s = ExperimentSpec("regression", "group", "source", "target", 0.2)
    r = nested_cv(s, d)
    assert r.metric == "mae" and len(r.values) == 5
    assert all(v >= 0 for v in r.values)
    assert audit_isolation(r, s, d) == 5


def test_option_search_and_ensemble(data):
    s = spec_for(0.2, "fixed", alpha=0.8, learner=LearnerSpec("knn"), search={"k": [3, 15]}, outer_folds=2,
                 inner_folds=2)
    r = nested_cv(s, data)
    assert all(f.options["k"] in (3, 15) for f in r.folds)
    assert all(len(f.inner_scores) == 2 for f in r.folds)
    z = spec_for(0.2, "fixed", alpha=0.8, zoo=(LearnerSpec("linear"), LearnerSpec("knn", {"k": 9})), outer_folds=2,
                 inner_folds=2)
    rz = nested_cv(z, data)
    assert rz.csv_row()["model"] == "ensemble"
    assert all(0.0 <= v <= 1.0 for v in rz.values)
    assert audit_isolation(rz, z, data) == 2
