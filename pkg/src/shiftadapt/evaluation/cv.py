"""Nested cross-validation for source-to-target adaptation experiments.

Target fractions:

* ``0``: train on the source group; evaluate once on every target row.
* ``0.1`` / ``0.2``: outer five-fold split of the target group. Outer fold
  ``o`` supplies the training target rows (all of it for 0.2, a stratified
  half for 0.1) and the other folds are the test set. With ``strict_paper_splits``
  set, the unpicked half of fold ``o`` is left unused.
* ``"0.8-train-all"``: target-only five-fold CV, no source rows.

Preprocessing is fitted on each outer training set only, and every row that
informs a selection decision is tracked and checked against the test set.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .. import preprocess
from .._parallel import derive_seed, parallel_map
from ..data import TEST_FOLD, UNUSED_FOLD, ColumnKind, Dataset, GroupedDataset, SplitError, adaptation_split, \
    digest_ids, label_strata, stratified_split, _assign_folds
from ..ensemble import LeakageError, stack_fit
from ..models.base import Features, erm_weights, features_of
from ..mmd import Kernel, median_bandwidth, mmd_unbiased
from ..models.learners import LearnerSpec
from ..theory import BoundInputs, optimal_alpha
from .metrics import UndefinedMetricError, auc, mae, paired_significance, score

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(k / (k + 1) for k in range(1, 11))
TRAIN_ALL = "0.8-train-all"
FRACTIONS = (0.0, 0.1, 0.2, TRAIN_ALL)
POLICIES = ("fixed", "grid", "theory")


def _norm_fraction(f):
    if isinstance(f, str):
        if f in (TRAIN_ALL, "train-all"):
            return TRAIN_ALL
        f = float(f)
    f = float(f)
    if f not in (0.0, 0.1, 0.2):
        raise ValueError(f"target_fraction must be one of {FRACTIONS}, got {f}")
    return f


@dataclass(frozen=True)
class ExperimentSpec:
    task: str
    attribute: str
    source: str
    target: str
    target_fraction: Any = 0.2
    learner: LearnerSpec = field(default_factory=lambda: LearnerSpec("linear"))
    zoo: tuple[LearnerSpec, ...] = ()
    alpha_policy: str = "grid"
    alpha: float | None = None
    search: Mapping[str, Sequence] = field(default_factory=dict)
    outer_folds: int = 5
    inner_folds: int = 5
    seed: int = 0
    strict_paper_splits: bool = True
    delta: float = 0.05
    ensemble_k: int = 5
    ensemble_repeats: int = 2

    def __post_init__(self):
        object.__setattr__(self, "target_fraction", _norm_fraction(self.target_fraction))
        object.__setattr__(self, "zoo", tuple(self.zoo))
        object.__setattr__(self, "search", {k: list(v) for k, v in dict(self.search).items()})
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.alpha_policy not in POLICIES:
            raise ValueError(f"alpha_policy must be one of {POLICIES}")
        if self.alpha_policy == "grid" and self.target_fraction == 0.0:
            raise ValueError("grid alpha search needs target rows in training (target_fraction > 0)")
        if self.alpha_policy == "fixed" and self.target_fraction not in (0.0, TRAIN_ALL):
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("fixed policy needs alpha in [0, 1]")
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ValueError("fold counts must be at least 2")

    @property
    def model_name(self) -> str:
        return "ensemble" if self.zoo else self.learner.name

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("learner", "zoo")}
        d["learner"] = self.learner.to_dict()
        d["zoo"] = [z.to_dict() for z in self.zoo]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        d = dict(d)
        if "learner" in d:
            d["learner"] = LearnerSpec.from_dict(d["learner"])
        d["zoo"] = tuple(LearnerSpec.from_dict(z) for z in d.get("zoo", ()))
        return cls(**d)


@dataclass(frozen=True)
class FoldResult:
    fold: int
    value: float | None
    alpha: float | None
    options: Mapping[str, Any]
    n_train_source: int
    n_train_target: int
    n_test: int
    selection_digest: str
    test_digest: str
    note: str = ""
    inner_scores: tuple = ()
    predictions: Mapping[str, float] = field(default_factory=dict, compare=False)


@dataclass
class MetricReport:
    spec: Mapping[str, Any]
    metric: str
    folds: list[FoldResult]
    comparisons: dict[str, dict] = field(default_factory=dict)

    @property
    def values(self) -> list[float]:
        return [f.value for f in self.folds if f.value is not None]

    @property
    def mean(self) -> float:
        v = self.values
        return float(np.mean(v)) if v else math.nan

    @property
    def std(self) -> float:
        """Sample standard deviation (ddof = 1) across defined folds; 0 for a single fold."""
        v = self.values
        return float(np.std(v, ddof=1)) if len(v) > 1 else (0.0 if v else math.nan)

    @property
    def undefined(self) -> dict[int, str]:
        return {f.fold: f.note for f in self.folds if f.value is None}

    def compare(self, name: str, baseline: "MetricReport") -> dict:
        """Paired t-test against ``baseline`` over folds defined in both reports."""
        mine = {f.fold: f.value for f in self.folds if f.value is not None}
        theirs = {f.fold: f.value for f in baseline.folds if f.value is not None}
        common = sorted(set(mine) & set(theirs))
        if len(common) < 2:
            entry = {"p_value": None, "note": "fewer than two paired folds"}
        else:
            t = paired_significance([mine[c] for c in common], [theirs[c] for c in common])
            entry = {"p_value": t.p_value, "statistic": t.statistic, "mean_difference": t.mean_difference,
                     "degenerate": t.degenerate, "folds": common}
        self.comparisons[name] = entry
        return entry

    def to_dict(self, include_predictions: bool = False) -> dict:
        folds = []
        for f in self.folds:
            d = asdict(f)
            d["inner_scores"] = [list(s) for s in f.inner_scores]
            if not include_predictions:
                d.pop("predictions")
            folds.append(d)
        return {"spec": dict(self.spec), "metric": self.metric, "folds": folds, "mean": self.mean,
                "std": self.std, "chosen_alpha": [f.alpha for f in self.folds], "undefined_folds": self.undefined,
                "comparisons": self.comparisons}

    def to_json(self, include_predictions: bool = False) -> str:
        return json.dumps(self.to_dict(include_predictions), indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        folds = []
        for f in d["folds"]:
            f = dict(f)
            f["inner_scores"] = tuple(tuple(s) for s in f.get("inner_scores", ()))
            folds.append(FoldResult(**f))
        return cls(d["spec"], d["metric"], folds, dict(d.get("comparisons", {})))

    CSV_FIELDS = ("source", "target", "fraction", "model", "metric", "mean", "std", "n_folds", "alphas")

    def csv_row(self) -> dict:
        s = self.spec
        return {"source": s["source"], "target": s["target"], "fraction": s["target_fraction"],
                "model": (s.get("learner") or {}).get("name") if not s.get("zoo") else "ensemble",
                "metric": self.metric, "mean": repr(self.mean), "std": repr(self.std),
                "n_folds": len(self.values),
                "alphas": ";".join("" if a is None else repr(a) for a in (f.alpha for f in self.folds))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


# -- model fitting ---------------------------------------------------------

def fit_model(spec: ExperimentSpec, options: Mapping, feats: Features, y, ids, is_target, alpha, seed: int):
    """Fit the experiment's learner (or stacked ensemble) with alpha-weighted samples."""
    if spec.zoo:
        zoo = [z.with_options(**options) for z in spec.zoo]
        return stack_fit(feats, y, ids, zoo, spec.task, is_target=is_target, alpha=alpha, k=spec.ensemble_k,
                         repeats=spec.ensemble_repeats, seed=seed, jobs=1)
    w = erm_weights(is_target, alpha)
    return spec.learner.with_options(**options).fit(feats, y, w, spec.task, seed=seed, is_target=is_target)


def _option_grid(search: Mapping[str, Sequence]) -> list[dict]:
    keys = sorted(search)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(search[k] for k in keys))] or [{}]


def _safe_score(task, p, y) -> float:
    try:
        return score(task, p, y)
    except UndefinedMetricError:
        return -math.inf


def inner_select(spec: ExperimentSpec, feats: Features, y, ids, is_target, folds, candidates, seed: int):
    """Pick the candidate ``(alpha, options)`` with the best pooled out-of-fold score on held-out target rows.

    Held-out predictions from all inner folds are pooled before scoring, so
    small target shares still give one well-defined metric. Rows scored are
    target rows, or all rows when training has no target rows. Ties go to
    the earliest candidate.
    """
    y = np.asarray(y, dtype=float)
    is_target = np.asarray(is_target, bool)
    scored = is_target if is_target.any() else np.ones_like(is_target)
    for j in range(spec.inner_folds):
        if not (scored & (folds == j)).any():
            raise SplitError(f"inner fold {j} holds no scored rows "
                             f"(target rows per inner fold: {np.bincount(folds[is_target], minlength=spec.inner_folds).tolist()})")
    results = []
    for ci, (alpha, opts) in enumerate(candidates):
        preds = np.full(y.size, np.nan)
        for j in range(spec.inner_folds):
            tr = np.flatnonzero(folds != j)
            ev = np.flatnonzero((folds == j) & scored)
            model = fit_model(spec, opts, feats.take(tr), y[tr], [ids[i] for i in tr], is_target[tr], alpha,
                              derive_seed(seed, ci, j))
            preds[ev] = model.predict(feats.take(ev))
        results.append(_safe_score(spec.task, preds[scored], y[scored]))
    best = int(np.argmax(results))
    return candidates[best], results


def inner_folds(ids, y, is_target, task, k, seed) -> np.ndarray:
    strata = label_strata(np.asarray(y, float), task) * 2 + np.asarray(is_target, int)
    assign = _assign_folds(list(ids), strata, k, np.random.default_rng(seed))
    return np.array([assign[i] for i in ids])


def feature_mmd(feats: Features, is_target, seed: int, repeats: int = 10) -> float:
    """Squared MMD between source and target rows on an RBF kernel, clipped at 0.

    The larger side is subsampled to the smaller one ``repeats`` times.
    """
    is_target = np.asarray(is_target, bool)
    X = feats.one_hot()
    xs, xt = X[~is_target], X[is_target]
    size = min(len(xs), len(xt))
    if size < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    pool = np.vstack([xs, xt])
    sample = pool if len(pool) <= 1000 else pool[np.sort(rng.choice(len(pool), 1000, replace=False))]
    kern = Kernel("rbf", median_bandwidth(sample))
    vals = [mmd_unbiased(xs[rng.choice(len(xs), size, replace=False)],
                         xt[rng.choice(len(xt), size, replace=False)], kern) for _ in range(repeats)]
    return max(0.0, float(np.mean(vals)))


def theory_alpha(feats: Features, is_target, vc_dimension: float, delta: float, seed: int) -> tuple[float, dict]:
    """Bound-minimising alpha with the divergence plugged in from :func:`feature_mmd`."""
    is_target = np.asarray(is_target, bool)
    d = feature_mmd(feats, is_target, seed)
    b = BoundInputs(vc_dimension, delta, int((~is_target).sum()), int(is_target.sum()), d)
    return optimal_alpha(b), {"divergence": d, "vc_dimension": vc_dimension, "delta": delta}


# -- outer loop ------------------------------------------------------------

def _outer_plans(spec: ExperimentSpec, raw: GroupedDataset):
    """Yield ``(fold, train_source_ids, train_target_ids, test_ids, unused_ids)``."""
    f = spec.target_fraction
    tgt = raw.target
    if f == 0.0:
        yield 0, list(raw.source.row_ids), [], list(tgt.row_ids), []
        return
    outer = stratified_split(tgt, spec.outer_folds, seed=derive_seed(spec.seed, 1))
    for o in range(spec.outer_folds):
        fold_ids = outer.fold_ids(o)
        if f == TRAIN_ALL:
            train = [i for i in tgt.row_ids if outer.assignments[i] != o]
            yield o, [], train, fold_ids, []
            continue
        # 0.2 takes the whole outer fold, 0.1 a stratified half of it.
        fraction = 1.0 if f == 0.2 else round(len(fold_ids) / 2) / raw.n
        plan = adaptation_split(raw, spec.inner_folds, fraction, seed=derive_seed(spec.seed, 2, o),
                                candidates=fold_ids, strict_paper_splits=spec.strict_paper_splits)
        train_t = [i for i in tgt.row_ids if plan.assignments[i] >= 0]
        test = [i for i in tgt.row_ids if plan.assignments[i] == TEST_FOLD]
        unused = [i for i in tgt.row_ids if plan.assignments[i] == UNUSED_FOLD]
        yield o, list(raw.source.row_ids), train_t, test, unused


def _run_fold(args):
    spec, data, fold, src_ids, tgt_ids, test_ids, unused = args
    touched: set[str] = set()
    train_ids = src_ids + tgt_ids
    train_raw = data.select_ids(train_ids)
    test_raw = data.select_ids(test_ids)
    if data.schema.preprocessed:
        train_d, test_d = train_raw, test_raw
    else:
        state = preprocess.fit(train_raw)
        touched.update(train_raw.row_ids)
        train_d, test_d = preprocess.transform(state, train_raw), preprocess.transform(state, test_raw)
    feats, y = features_of(train_d), train_d.labels.astype(float)
    ids = list(train_d.row_ids)
    tset = set(tgt_ids)
    is_target = np.array([i in tset for i in ids])
    seed = derive_seed(spec.seed, 3, fold)
    f = spec.target_fraction

    options_grid = _option_grid(spec.search)
    note = ""
    if f == 0.0:
        alphas = [0.0]
    elif f == TRAIN_ALL:
        alphas = [1.0]
    elif spec.alpha_policy == "fixed":
        alphas = [spec.alpha]
    elif spec.alpha_policy == "grid":
        alphas = list(ALPHA_GRID)
    else:
        vc = spec.learner.options.get("vc_dimension", feats.width + 1)
        a, info = theory_alpha(feats, is_target, vc, spec.delta, seed)
        # The bound's minimiser joins the grid; listed first, it wins ties.
        alphas = [a] + [g for g in ALPHA_GRID if g != a]
        note = f"theory: d={info['divergence']:.6g} V={vc}"
    candidates = [(a, o) for a in alphas for o in options_grid]
    inner_scores: tuple = ()
    if len(candidates) > 1:
        # Selection-only rows: source-only settings score on source rows.
        folds = inner_folds(ids, y, is_target, spec.task, spec.inner_folds, derive_seed(seed, 4))
        (alpha, opts), scores = inner_select(spec, feats, y, ids, is_target, folds, candidates, seed)
        touched.update(ids)
        inner_scores = tuple((c[0], json.dumps(c[1], sort_keys=True), s) for c, s in zip(candidates, scores))
    else:
        alpha, opts = candidates[0]
    touched.update(ids)
    leaked = touched & set(test_ids)
    if leaked:
        raise LeakageError(f"fold {fold}: {len(leaked)} test rows informed training or selection")
    model = fit_model(spec, opts, feats, y, ids, is_target, alpha, derive_seed(seed, 5))
    preds = model.predict(features_of(test_d))
    try:
        value = auc(preds, test_d.labels) if spec.task == "classification" else mae(preds, test_d.labels)
    except UndefinedMetricError as exc:
        value, note = None, f"undefined: {exc}"
        log.warning("fold %d: %s", fold, note)
    return FoldResult(fold, value, None if f == TRAIN_ALL else alpha, opts, len(src_ids), len(tgt_ids),
                      len(test_ids), digest_ids(touched), digest_ids(test_ids), note, inner_scores,
                      dict(zip(test_d.row_ids, (float(p) for p in preds))))


def nested_cv(spec: ExperimentSpec, data: Dataset, jobs: int | None = 1) -> MetricReport:
    """Run the outer/inner protocol on ``data`` (raw or preprocessed) and report per-fold test metrics."""
    col = data.schema.column(spec.attribute)
    if col.kind is not ColumnKind.GROUP:
        raise ValueError(f"{spec.attribute!r} is not a group-attribute column")
    if data.schema.task != spec.task:
        raise ValueError(f"spec task {spec.task!r} differs from data task {data.schema.task!r}")
    pair = GroupedDataset.from_groups(data, spec.attribute, spec.source, spec.target)
    args = [(spec, data, *plan) for plan in _outer_plans(spec, pair)]
    folds = parallel_map(_run_fold, args, jobs)
    for fr, a in zip(folds, args):
        if set(a[4]) & set(a[5]) or set(a[3]) & set(a[5]):
            raise LeakageError(f"fold {fr.fold}: training and test ids overlap")
    metric = "auc" if spec.task == "classification" else "mae"
    return MetricReport(spec.to_dict(), metric, list(folds))


def audit_isolation(report: MetricReport, spec: ExperimentSpec, data: Dataset) -> int:
    """Re-derive every fold's split and check that no test row was used for training or selection."""
    pair = GroupedDataset.from_groups(data, spec.attribute, spec.source, spec.target)
    checked = 0
    for (fold, src, tgt, test, unused), fr in zip(_outer_plans(spec, pair), report.folds):
        if digest_ids(test) != fr.test_digest:
            raise LeakageError(f"fold {fold}: test set does not match its recorded digest")
        if digest_ids(src + tgt) != fr.selection_digest:
            raise LeakageError(f"fold {fold}: selection rows do not match the recorded training rows")
        if set(src + tgt) & set(test) or set(unused) & set(test):
            raise LeakageError(f"fold {fold}: selection and test rows overlap")
        if set(fr.predictions) != set(test):
            raise LeakageError(f"fold {fold}: predictions cover rows outside the test set")
        checked += 1
    return checked
