"""Repeated k-fold bagging, two-level stacking and greedy ensemble selection.

Every fitted base model records the ids of the rows it was trained on, so
each out-of-fold prediction can be audited against the model that produced it.
Fold assignments depend only on the seed and the repeat index, which keeps
them shared across learners and stack levels.
"""
from __future__ import annotations

import hashlib
import json
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._parallel import derive_seed, parallel_map
from .data import _assign_folds, digest_ids, label_strata
from .evaluation.metrics import UndefinedMetricError, score
from .models.base import Features, erm_weights
from .models.learners import FittedLearner, LearnerSpec

log = logging.getLogger(__name__)


class LeakageError(AssertionError):
    """An out-of-fold prediction came from a model trained on that row."""


class BaggingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FoldRecord:
    model_id: str
    repeat: int
    fold: int
    seed: int
    train_ids: tuple[str, ...]
    train_digest: str
    predicted_ids: tuple[str, ...]


@dataclass(frozen=True)
class BaggedModel:
    spec: LearnerSpec
    task: str
    members: tuple[FittedLearner, ...]
    records: tuple[FoldRecord, ...]

    def predict(self, feats: Features) -> np.ndarray:
        return np.mean([m.predict(feats) for m in self.members], axis=0)

    def digests(self) -> list[str]:
        return [m.digest() for m in self.members]


@dataclass(frozen=True)
class OofMatrix:
    row_ids: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray
    provenance: Mapping[str, tuple[FoldRecord, ...]]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    @classmethod
    def from_columns(cls, row_ids, columns: Sequence[tuple[str, np.ndarray, tuple[FoldRecord, ...]]]) -> "OofMatrix":
        values = np.column_stack([c[1] for c in columns]) if columns else np.zeros((len(row_ids), 0))
        return cls(tuple(row_ids), tuple(c[0] for c in columns), values, {c[0]: c[2] for c in columns})


def audit_oof(oof: OofMatrix) -> int:
    """Check every OOF entry against its producing model's training set; returns the number of checks."""
    checks = 0
    for name in oof.names:
        records = oof.provenance[name]
        repeats = {r.repeat for r in records}
        for rec in records:
            if digest_ids(rec.train_ids) != rec.train_digest:
                raise LeakageError(f"{name} r{rec.repeat} f{rec.fold}: training digest does not match its id set")
            train = set(rec.train_ids)
            clash = [i for i in rec.predicted_ids if i in train]
            if clash:
                raise LeakageError(f"{name} r{rec.repeat} f{rec.fold}: predicted rows {clash[:5]} were in training")
            checks += len(rec.predicted_ids)
        covered = {}
        for rec in records:
            for i in rec.predicted_ids:
                covered[i] = covered.get(i, 0) + 1
        if set(covered) != set(oof.row_ids) or any(c != len(repeats) for c in covered.values()):
            raise LeakageError(f"{name}: OOF coverage is not exactly one prediction per row per repeat")
    return checks


def fold_assignments(row_ids: Sequence[str], y, task: str, k: int, repeats: int, seed: int,
                     is_target=None) -> np.ndarray:
    """``(repeats, n)`` fold indices, stratified by label and by source/target membership."""
    strata = label_strata(np.asarray(y, dtype=float), task) * 2
    if is_target is not None:
        strata = strata + np.asarray(is_target, dtype=int)
    ids = list(row_ids)
    out = np.empty((repeats, len(ids)), dtype=int)
    for r in range(repeats):
        assign = _assign_folds(ids, strata, k, np.random.default_rng(derive_seed(seed, r)))
        out[r] = [assign[i] for i in ids]
    return out


def _fit_fold(task_args):
    spec, feats, y, w, task, seed, is_target, name, r, f = task_args
    try:
        return spec.fit(feats, y, w, task, seed=seed, is_target=is_target)
    except Exception as exc:
        raise BaggingError(f"{name}: repeat {r} fold {f} failed: {exc}") from exc


def bagged_oof_fit(feats: Features, y, row_ids: Sequence[str], spec: LearnerSpec, task: str, *, k: int = 5,
                   repeats: int = 2, seed: int = 0, is_target=None, alpha: float | None = None,
                   weights=None, folds: np.ndarray | None = None, jobs: int | None = 1):
    """Fit ``k * repeats`` models; returns the bagged model, its OOF column and the fold records.

    With ``alpha`` set, sample weights are recomputed on each training subset
    via the alpha-weighted scheme; otherwise ``weights`` (default uniform) are
    subset as given.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    y = np.asarray(y, dtype=float)
    ids = list(row_ids)
    n = len(ids)
    tgt = None if is_target is None else np.asarray(is_target, dtype=bool)
    if alpha is not None and tgt is None:
        raise ValueError("alpha-weighting needs target membership")
    base_w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if folds is None:
        folds = fold_assignments(ids, y, task, k, repeats, seed, tgt)
    jobs_args, meta = [], []
    for r in range(repeats):
        for f in range(k):
            test = np.flatnonzero(folds[r] == f)
            train = np.flatnonzero(folds[r] != f)
            if test.size == 0 or train.size == 0:
                raise BaggingError(f"{spec.name}: repeat {r} fold {f} is empty")
            sub_t = None if tgt is None else tgt[train]
            if alpha is not None:
                try:
                    w = erm_weights(sub_t, alpha)
                except ValueError as exc:
                    raise BaggingError(f"{spec.name}: repeat {r} fold {f}: {exc}") from exc
            else:
                w = base_w[train]
            mseed = derive_seed(seed, r, f, int(hashlib.sha256(spec.name.encode()).hexdigest()[:8], 16))
            jobs_args.append((spec, feats.take(train), y[train], w, task, mseed, sub_t, spec.name, r, f))
            meta.append((r, f, mseed, train, test))
    members = parallel_map(_fit_fold, jobs_args, jobs)
    oof = np.zeros(n)
    records = []
    for model, (r, f, mseed, train, test) in zip(members, meta):
        oof[test] += model.predict(feats.take(test)) / repeats
        tids = tuple(sorted(ids[i] for i in train))
        records.append(FoldRecord(spec.name, r, f, mseed, tids, digest_ids(tids), tuple(ids[i] for i in test)))
    bag = BaggedModel(spec, task, tuple(members), tuple(records))
    return bag, oof, tuple(records)


@dataclass(frozen=True)
class Selection:
    weights: np.ndarray
    picks: tuple[int, ...]
    trajectory: tuple[float, ...]


def ensemble_select(oof, labels, metric: Callable | str = "classification", iterations: int = 25,
                    rows=None) -> Selection:
    """Greedy forward selection with replacement over OOF columns.

    Each step adds the column whose inclusion maximises the metric of the
    uniform average over the selected multiset; selection stops early once
    every candidate would lower the metric. Ties favour the column picked
    most often so far, then the lowest index. Weights are pick frequencies.
    """
    P = np.asarray(oof, dtype=float)
    P = P[:, None] if P.ndim == 1 else P
    y = np.asarray(labels, dtype=float)
    if rows is not None:
        P, y = P[rows], y[rows]
    if P.shape[1] == 0:
        raise ValueError("need at least one column")
    fn = (lambda p, t: score(metric, p, t)) if isinstance(metric, str) else metric
    total = np.zeros(P.shape[0])
    picks: list[int] = []
    traj: list[float] = []
    for it in range(iterations):
        cand = np.array([fn((total + P[:, j]) / (it + 1), y) for j in range(P.shape[1])])
        tied = np.flatnonzero(cand == cand.max())
        # Ties go to the most-picked column, keeping the ensemble sparse.
        counts = np.bincount(picks, minlength=P.shape[1])[tied]
        best = int(tied[np.argmax(counts)])
        if traj and cand[best] < traj[-1]:
            break
        picks.append(best)
        traj.append(float(cand[best]))
        total += P[:, best]
    w = np.bincount(picks, minlength=P.shape[1]) / len(picks)
    return Selection(w, tuple(picks), tuple(traj))


@dataclass(frozen=True)
class StackedEnsemble:
    task: str
    level1: tuple[BaggedModel, ...]
    level2: tuple[BaggedModel, ...]
    weights: np.ndarray
    n_numeric: int
    vocab_sizes: tuple[int, ...]
    excluded: Mapping[str, str] = field(default_factory=dict)
    oof: tuple[OofMatrix, ...] = ()
    selection: Selection | None = None
    seed: int = 0
    alpha: float | None = None

    @property
    def top(self) -> tuple[BaggedModel, ...]:
        return self.level2 or self.level1

    def predict(self, feats: Features) -> np.ndarray:
        return ensemble_predict(self, feats)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode()).hexdigest()

    def level2_features(self, feats: Features) -> Features:
        return feats.append_numeric(np.column_stack([b.predict(feats) for b in self.level1]))

    def manifest(self) -> dict:
        def bag_entry(b: BaggedModel):
            return {"spec": b.spec.to_dict(), "digests": b.digests(),
                    "folds": [{"repeat": r.repeat, "fold": r.fold, "seed": r.seed, "train_digest": r.train_digest}
                              for r in b.records]}
        return {"task": self.task, "seed": self.seed, "alpha": self.alpha,
                "n_numeric": self.n_numeric, "vocab_sizes": list(self.vocab_sizes),
                "level1": [bag_entry(b) for b in self.level1], "level2": [bag_entry(b) for b in self.level2],
                "weights": [float(w) for w in self.weights], "excluded": dict(self.excluded)}

    def save(self, directory: str | Path) -> Path:
        """Manifest JSON plus one pickled blob per bagged model."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        man = self.manifest()
        for level, bags in (("level1", self.level1), ("level2", self.level2)):
            for i, b in enumerate(bags):
                blob = pickle.dumps(b, protocol=4)
                name = f"{level}_{i}_{hashlib.sha256(blob).hexdigest()[:16]}.pkl"
                (d / name).write_bytes(blob)
                man[level][i]["blob"] = name
        path = d / "manifest.json"
        path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory: str | Path) -> "StackedEnsemble":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        bags = {lvl: tuple(pickle.loads((d / e["blob"]).read_bytes()) for e in man[lvl])
                for lvl in ("level1", "level2")}
        for lvl in bags:
            for b, e in zip(bags[lvl], man[lvl]):
                if b.digests() != e["digests"]:
                    raise ValueError(f"model blob {e['blob']} does not match its manifest digests")
        return cls(man["task"], bags["level1"], bags["level2"], np.array(man["weights"]), man["n_numeric"],
                   tuple(man["vocab_sizes"]), man["excluded"], seed=man["seed"], alpha=man["alpha"])


def _selection_rows(y, is_target, task) -> np.ndarray | None:
    """Score on target rows when they can carry the metric, else on all rows."""
    if is_target is None or not np.any(is_target):
        return None
    t = np.asarray(is_target, bool)
    if task == "classification" and len(np.unique(np.asarray(y)[t])) < 2:
        return None
    return t if t.sum() >= 4 else None


def stack_fit(feats: Features, y, row_ids: Sequence[str], zoo: Sequence[LearnerSpec], task: str, *,
              is_target=None, alpha: float | None = None, k: int = 5, repeats: int = 2, seed: int = 0,
              iterations: int = 25, jobs: int | None = 1) -> StackedEnsemble:
    """Two-level stack: bagged base models, then bagged models on features plus level-1 OOF columns.

    A one-learner zoo skips the second level and uses an identity combiner.
    Failed base models are dropped with their reason recorded.
    """
    if not zoo:
        raise ValueError("zoo is empty")
    names = [s.name for s in zoo]
    if len(set(names)) != len(names):
        raise ValueError("learner names must be unique")
    y = np.asarray(y, dtype=float)
    tgt = None if is_target is None else np.asarray(is_target, bool)
    folds = fold_assignments(row_ids, y, task, k, repeats, seed, tgt)
    excluded: dict[str, str] = {}

    def fit_level(level_feats, level, prefix):
        bags, cols = [], []
        for spec in zoo:
            named = LearnerSpec(spec.kind, spec.options, f"{prefix}{spec.name}")
            try:
                bag, oof, recs = bagged_oof_fit(level_feats, y, row_ids, named, task, k=k, repeats=repeats,
                                                seed=derive_seed(seed, level), is_target=tgt, alpha=alpha,
                                                folds=folds, jobs=jobs)
            except (BaggingError, ValueError, ArithmeticError) as exc:
                excluded[named.name] = str(exc)
                log.warning("excluding %s: %s", named.name, exc)
                continue
            bags.append(bag)
            cols.append((named.name, oof, recs))
        return bags, OofMatrix.from_columns(row_ids, cols)

    level1, oof1 = fit_level(feats, 1, "L1/")
    if not level1:
        raise BaggingError(f"every base model failed: {excluded}")
    audit_oof(oof1)
    rows = _selection_rows(y, tgt, task)
    if len(level1) == 1:
        return StackedEnsemble(task, tuple(level1), (), np.ones(1), feats.n_numeric, feats.vocab_sizes,
                               excluded, (oof1,), None, seed, alpha)
    level2, oof2 = fit_level(feats.append_numeric(oof1.values), 2, "L2/")
    if not level2:
        raise BaggingError(f"every level-2 model failed: {excluded}")
    audit_oof(oof2)
    try:
        sel = ensemble_select(oof2.values, y, task, iterations, rows)
    except UndefinedMetricError:
        sel = ensemble_select(oof2.values, y, task, iterations)
    return StackedEnsemble(task, tuple(level1), tuple(level2), sel.weights, feats.n_numeric, feats.vocab_sizes,
                           excluded, (oof1, oof2), sel, seed, alpha)


def ensemble_predict(e: StackedEnsemble, feats: Features) -> np.ndarray:
    if feats.n_numeric != e.n_numeric or feats.vocab_sizes != e.vocab_sizes:
        raise ValueError(f"ensemble expects {e.n_numeric} numeric features and vocab {e.vocab_sizes}, "
                         f"got {feats.n_numeric} and {feats.vocab_sizes}")
    inputs = e.level2_features(feats) if e.level2 else feats
    preds = np.column_stack([b.predict(inputs) for b in e.top])
    return preds @ e.weights
