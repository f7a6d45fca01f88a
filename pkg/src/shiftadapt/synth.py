"""Seeded synthetic populations with controllable group shift.

Each group draws Gaussian features around its own mean. Labels come either
from a logistic (or linear-Gaussian) ground truth with per-group weights, so
that covariate shift and concept shift can be set independently, or from a
labelled Gaussian mixture.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import preprocess
from ._parallel import derive_seed, parallel_map
from .data import Column, ColumnKind, Dataset, FeatureSchema, GroupedDataset, SchemaError
from .evaluation.cv import ALPHA_GRID, ExperimentSpec, feature_mmd, inner_folds, inner_select
from .evaluation.metrics import auc, mae
from .models.base import erm_weights, features_of
from .models.learners import LearnerSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cluster:
    label: float
    mean: tuple[float, ...]
    proportion: float = 1.0
    cov_scale: float = 1.0


@dataclass(frozen=True)
class GroupSpec:
    name: str
    size: int
    mean: tuple[float, ...] | None = None
    cov_scale: float = 1.0
    weights: tuple[float, ...] | None = None
    bias: float = 0.0
    noise: float = 1.0
    clusters: tuple[Cluster, ...] = ()
    category_freqs: Mapping[str, Sequence[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"group {self.name!r}: size must be >= 1")
        if not self.cov_scale > 0 or not self.noise >= 0:
            raise ValueError(f"group {self.name!r}: cov_scale must be > 0 and noise >= 0")
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if self.clusters and any(not c.proportion > 0 or not c.cov_scale > 0 for c in self.clusters):
            raise ValueError(f"group {self.name!r}: cluster proportions and scales must be > 0")


@dataclass(frozen=True)
class ShiftSpec:
    dimensions: int
    groups: tuple[GroupSpec, ...]
    task: str = "classification"
    attribute: str = "group"
    label: str = "y"
    missing_rate: float = 0.0
    categorical: Mapping[str, Sequence[str]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.dimensions < 1:
            raise ValueError("dimensions must be >= 1")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        names = [g.name for g in self.groups]
        if not names or len(set(names)) != len(names):
            raise ValueError("group names must be nonempty and unique")
        for g in self.groups:
            for vec in [g.mean, g.weights] + [c.mean for c in g.clusters]:
                if vec is not None and len(vec) != self.dimensions:
                    raise ValueError(f"group {g.name!r}: vector length differs from dimensions")
            if not g.clusters and g.weights is None:
                raise ValueError(f"group {g.name!r} needs label weights or clusters")

    @property
    def feature_names(self) -> list[str]:
        return [f"x{j}" for j in range(self.dimensions)]

    def schema(self) -> FeatureSchema:
        cols = [Column(n, ColumnKind.CONTINUOUS) for n in self.feature_names]
        cols += [Column(n, ColumnKind.CATEGORICAL, tuple(c)) for n, c in self.categorical.items()]
        cols.append(Column(self.attribute, ColumnKind.GROUP, tuple(g.name for g in self.groups)))
        cols.append(Column(self.label, ColumnKind.LABEL))
        return FeatureSchema(tuple(cols), self.task)


def _group_rows(spec: ShiftSpec, g: GroupSpec, rng: np.random.Generator):
    d = spec.dimensions
    if g.clusters:
        p = np.array([c.proportion for c in g.clusters], dtype=float)
        which = rng.choice(len(g.clusters), size=g.size, p=p / p.sum())
        means = np.array([c.mean for c in g.clusters])[which]
        scales = np.array([c.cov_scale for c in g.clusters])[which]
        X = means + np.sqrt(scales)[:, None] * rng.standard_normal((g.size, d))
        y = np.array([g.clusters[i].label for i in which], dtype=float)
        return X, y
    mean = np.zeros(d) if g.mean is None else np.asarray(g.mean, float)
    X = mean + np.sqrt(g.cov_scale) * rng.standard_normal((g.size, d))
    z = X @ np.asarray(g.weights, float) + g.bias
    if spec.task == "classification":
        y = (rng.random(g.size) < expit(z)).astype(float)
    else:
        y = z + g.noise * rng.standard_normal(g.size)
    return X, y


def generate(spec: ShiftSpec) -> Dataset:
    """Draw every group's rows; missing feature cells are injected completely at random."""
    rng = np.random.default_rng(spec.seed)
    schema = spec.schema()
    blocks, ids = [], []
    for gi, g in enumerate(spec.groups):
        X, y = _group_rows(spec, g, rng)
        cat_cols = []
        for name, cats in spec.categorical.items():
            freqs = np.asarray(g.category_freqs.get(name, np.ones(len(cats))), dtype=float)
            if freqs.size != len(cats) or np.any(freqs < 0) or freqs.sum() <= 0:
                raise SchemaError(f"group {g.name!r}: bad category frequencies for {name!r}")
            cat_cols.append(rng.choice(len(cats), size=g.size, p=freqs / freqs.sum()).astype(float))
        group_col = np.full(g.size, float(schema.column(spec.attribute).code(g.name)))
        blocks.append(np.column_stack([X] + cat_cols + [group_col, y]))
        ids += [f"{g.name}-{i:06d}" for i in range(g.size)]
    values = np.vstack(blocks)
    missing = np.zeros(values.shape, dtype=bool)
    if spec.missing_rate > 0:
        n_feat = spec.dimensions + len(spec.categorical)
        missing[:, :n_feat] = rng.random((values.shape[0], n_feat)) < spec.missing_rate
        values[missing] = 0.0
    return Dataset(schema, values, missing, ids)


def shift_pair_spec(shift: float, m: int, n: int, *, dims: int = 10, concept: float = 1.0, signal: float = 1.5,
                    task: str = "classification", seed: int = 0) -> ShiftSpec:
    """Source/target pair: target mean moved by ``shift`` along the first axis.

    Source labels depend on the first half of the axes; ``concept`` rotates the
    target's weights toward the second half by an amount that grows with
    ``shift`` (0 keeps a pure covariate shift).
    """
    half = max(1, dims // 2)
    w_s = np.zeros(dims)
    w_s[:half] = signal / np.sqrt(half)
    other = np.zeros(dims)
    other[half:] = signal / np.sqrt(max(1, dims - half))
    angle = min(np.pi / 2, concept * shift * np.pi / 8)
    w_t = np.cos(angle) * w_s + np.sin(angle) * other
    mu = np.zeros(dims)
    mu[0] = shift
    b_t = -float(w_t @ mu)
    return ShiftSpec(dims, (GroupSpec("source", m, weights=tuple(w_s)),
                            GroupSpec("target", n, mean=tuple(mu), weights=tuple(w_t), bias=b_t)),
                     task=task, seed=seed)


def mci_scenario(seed: int = 0, *, dims: int = 6, m: int = 600, n: int = 300, n_secondary: int = 200,
                 separation: float = 2.5, tilt: float = 1.0) -> tuple[Dataset, Dataset]:
    """Primary AD-vs-CN data for two sites and an MCI cohort at the target site.

    At the target site the disease direction is tilted away from the source
    direction by ``tilt`` radians. Progressive MCI sits between the middle
    and the AD cluster, stable MCI between the middle and the CN cluster, so
    a primary model aligned with the target direction ranks MCI by outcome.
    """
    e1 = np.zeros(dims)
    e1[0] = 1.0
    e2 = np.zeros(dims)
    e2[1] = 1.0
    u_s = e1
    u_t = np.cos(tilt) * e1 + np.sin(tilt) * e2
    half = separation / 2

    def clusters(u, hi, lo):
        return (Cluster(hi, tuple(half * u)), Cluster(lo, tuple(-half * u)))

    primary = ShiftSpec(dims, (GroupSpec("siteA", m, clusters=clusters(u_s, 1.0, 0.0)),
                               GroupSpec("siteB", n, clusters=clusters(u_t, 1.0, 0.0))),
                        attribute="site", label="diagnosis", seed=seed)
    secondary = ShiftSpec(dims, (GroupSpec("siteA", 1, clusters=(Cluster(0.0, tuple(np.zeros(dims))),)),
                                 GroupSpec("siteB", n_secondary,
                                           clusters=(Cluster(1.0, tuple(0.5 * half * u_t), 1.0, 1.0),
                                                     Cluster(0.0, tuple(-0.5 * half * u_t), 1.0, 1.0)))),
                          attribute="site", label="diagnosis", seed=seed + 10_000)
    sec = generate(secondary)
    keep = [i for i, g in enumerate(sec.categories_of("site")) if g == "siteB"]
    return generate(primary), sec.take(keep)


# -- sweep -----------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    shift: float
    seed: int
    n: int
    mmd: float
    alpha: float
    tuned: float
    source_only: float
    target_only: float


def _arm_metric(task, learner, feats, y, is_target, alpha, test_feats, test_y, seed):
    if alpha == 1.0:
        sel = np.flatnonzero(is_target)
        model = learner.fit(feats.take(sel), y[sel], np.ones(sel.size), task, seed=seed)
    else:
        model = learner.fit(feats, y, erm_weights(is_target, alpha), task, seed=seed, is_target=is_target)
    p = model.predict(test_feats)
    return auc(p, test_y) if task == "classification" else mae(p, test_y)


def sweep_cell(shift: float, seed: int, *, m: int = 2000, n: int = 40, n_test: int = 4000, dims: int = 10,
               concept: float = 1.0, learner=None, n_inner: int = 5, task: str = "classification") -> SweepRow:
    """One (shift, seed) cell: tuned-alpha versus source-only and target-only arms on a held-out target sample."""

    learner = learner or LearnerSpec("linear")
    spec = shift_pair_spec(shift, m, n + n_test, dims=dims, concept=concept, task=task, seed=seed)
    data = generate(spec)
    pair = GroupedDataset.from_groups(data, "group", "source", "target")
    tgt_train, tgt_test = pair.target.take(np.arange(n)), pair.target.take(np.arange(n, n + n_test))
    train = pair.source.concat(tgt_train)
    state = preprocess.fit(train)
    train_p, test_p = preprocess.transform(state, train), preprocess.transform(state, tgt_test)
    feats, y = features_of(train_p), train_p.labels.astype(float)
    test_feats, test_y = features_of(test_p), test_p.labels.astype(float)
    is_target = np.r_[np.zeros(m, bool), np.ones(n, bool)]
    ids = list(train_p.row_ids)
    exp = ExperimentSpec(task, "group", "source", "target", 0.2, learner, inner_folds=n_inner, seed=seed)
    folds = inner_folds(ids, y, is_target, task, n_inner, derive_seed(seed, 4))
    (alpha, _), _ = inner_select(exp, feats, y, ids, is_target, folds, [(a, {}) for a in ALPHA_GRID],
                                 derive_seed(seed, 3))
    mseed = derive_seed(seed, 5)
    arms = [_arm_metric(task, learner, feats, y, is_target, a, test_feats, test_y, mseed) for a in (alpha, 0.0, 1.0)]
    return SweepRow(shift, seed, n, feature_mmd(feats, is_target, seed), alpha, *arms)


def shift_sweep(shifts: Sequence[float], seeds: Sequence[int], *, jobs: int | None = 1, **cell_kw) -> list[SweepRow]:
    """Run :func:`sweep_cell` over every (shift, seed); at least two shifts and ten seeds."""
    if len(shifts) < 2 or len(seeds) < 10:
        raise ValueError("shift_sweep needs >= 2 shift magnitudes and >= 10 seeds")
    cells = [(float(s), int(seed)) for s in shifts for seed in seeds]
    return parallel_map(_SweepTask(cell_kw), cells, jobs)


@dataclass(frozen=True)
class _SweepTask:
    kw: Mapping

    def __call__(self, cell):
        return sweep_cell(cell[0], cell[1], **self.kw)


def sweep_table(rows: Sequence[SweepRow]) -> list[dict]:
    """Per-shift means of the sweep columns."""
    out = []
    for s in sorted({r.shift for r in rows}):
        sel = [r for r in rows if r.shift == s]
        out.append({"shift": s, "seeds": len(sel),
                    **{k: float(np.mean([getattr(r, k) for r in sel]))
                       for k in ("mmd", "alpha", "tuned", "source_only", "target_only")}})
    return out



def fit_primary(data: Dataset, attribute: str, source: str, target: str, target_fraction: float, seed: int,
                learner: LearnerSpec | None = None):
    """Primary pipeline from the source group plus a share of the target group, alpha tuned on the grid."""
    from .pipeline import fit_pipeline
    spec = ExperimentSpec(data.schema.task, attribute, source, target, target_fraction,
                          learner or LearnerSpec("linear"), alpha_policy="grid" if target_fraction else "fixed",
                          seed=seed)
    return fit_pipeline(spec, data)
