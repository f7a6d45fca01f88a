"""Column-typed tabular datasets, group partitions and fold bookkeeping.

Cells are held in a float matrix with a parallel boolean ``missing`` mask, so
a missing value is never confused with a number. Categorical and
group-attribute cells store the integer index of their category.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

UNKNOWN = "unknown"
TEST_FOLD = -1
UNUSED_FOLD = -2


class SchemaError(ValueError):
    """Raised when data does not conform to its declared schema."""


class SplitError(ValueError):
    """Raised when a requested split cannot honour its preconditions."""


class ColumnKind(str, Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"
    LABEL = "label"
    GROUP = "group-attribute"


@dataclass(frozen=True)
class Column:
    name: str
    kind: ColumnKind
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ColumnKind(self.kind))
        if self.kind in (ColumnKind.CATEGORICAL, ColumnKind.GROUP):
            cats = tuple(str(c) for c in (self.categories or ()))
            if len(set(cats)) != len(cats):
                raise SchemaError(f"column {self.name!r} has duplicate categories")
            if UNKNOWN not in cats:
                cats = cats + (UNKNOWN,)
            object.__setattr__(self, "categories", cats)
        elif self.categories is not None:
            raise SchemaError(f"column {self.name!r} of kind {self.kind.value} cannot carry categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind in (ColumnKind.CATEGORICAL, ColumnKind.GROUP)

    def code(self, value: str) -> int:
        return self.categories.index(str(value))


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered column declarations.

    ``task`` is ``"classification"`` (binary 0/1 labels) or ``"regression"``.
    ``preprocessed`` marks schemas produced by :func:`shiftadapt.preprocess.transform`.
    """

    columns: tuple[Column, ...]
    task: str = "classification"
    id_column: str = "row_id"
    preprocessed: bool = False

    def __post_init__(self):
        cols = tuple(c if isinstance(c, Column) else Column(**c) for c in self.columns)
        object.__setattr__(self, "columns", cols)
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        if self.id_column in names:
            raise SchemaError(f"id column {self.id_column!r} clashes with a data column")
        n_labels = sum(c.kind is ColumnKind.LABEL for c in cols)
        if n_labels != 1:
            raise SchemaError(f"schema needs exactly one label column, found {n_labels}")
        if self.task not in ("classification", "regression"):
            raise SchemaError(f"unknown task {self.task!r}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def label(self) -> str:
        return next(c.name for c in self.columns if c.kind is ColumnKind.LABEL)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"no column named {name!r}") from None

    def column(self, name: str) -> Column:
        return self.columns[self.index(name)]

    def of_kind(self, *kinds: ColumnKind) -> list[Column]:
        return [c for c in self.columns if c.kind in kinds]

    @property
    def feature_columns(self) -> list[Column]:
        return self.of_kind(ColumnKind.CONTINUOUS, ColumnKind.CATEGORICAL)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "id_column": self.id_column,
            "preprocessed": self.preprocessed,
            "columns": [
                {"name": c.name, "kind": c.kind.value, **({"categories": list(c.categories)} if c.is_categorical else {})}
                for c in self.columns
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        cols = tuple(
            Column(c["name"], ColumnKind(c["kind"]), tuple(c["categories"]) if c.get("categories") is not None else None)
            for c in d["columns"]
        )
        return cls(
            cols,
            task=d.get("task", "classification"),
            id_column=d.get("id_column", "row_id"),
            preprocessed=bool(d.get("preprocessed", False)),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable table of typed cells with stable string row identifiers."""

    __slots__ = ("schema", "values", "missing", "row_ids")

    def __init__(self, schema: FeatureSchema, values, missing, row_ids: Sequence[str]):
        values = np.asarray(values, dtype=np.float64)
        missing = np.asarray(missing, dtype=bool)
        n, p = values.shape if values.ndim == 2 else (0, -1)
        if values.ndim != 2 or p != len(schema.columns):
            raise SchemaError(f"cell matrix must have shape (n, {len(schema.columns)}), got {values.shape}")
        if missing.shape != values.shape:
            raise SchemaError("missing mask shape differs from cell matrix")
        if n < 1:
            raise SchemaError("a dataset needs at least one row")
        row_ids = tuple(str(r) for r in row_ids)
        if len(row_ids) != n or len(set(row_ids)) != n:
            raise SchemaError("row_ids must be unique and one per row")
        values = np.where(missing, 0.0, values)
        for j, col in enumerate(schema.columns):
            v, miss = values[:, j], missing[:, j]
            present = v[~miss]
            if col.kind is ColumnKind.LABEL and miss.any():
                raise SchemaError(f"label column {col.name!r} has missing cells")
            if not np.all(np.isfinite(present)):
                raise SchemaError(f"column {col.name!r} has non-finite cells")
            if col.is_categorical:
                if np.any(present != np.round(present)) or np.any(present < 0) or np.any(present >= len(col.categories)):
                    raise SchemaError(f"column {col.name!r} has out-of-vocabulary category codes")
            if col.kind is ColumnKind.LABEL and schema.task == "classification":
                if not np.all(np.isin(present, (0.0, 1.0))):
                    raise SchemaError(f"classification label {col.name!r} must be 0/1")
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "missing", _frozen(missing))
        object.__setattr__(self, "row_ids", row_ids)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    def __reduce__(self):
        return (_rebuild_dataset, (self.schema, np.asarray(self.values), np.asarray(self.missing), self.row_ids))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"Dataset(n_rows={len(self)}, columns={self.schema.names})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.row_ids == other.row_ids
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.values, other.values)
        )

    # -- construction -------------------------------------------------
    @classmethod
    def from_columns(
        cls, schema: FeatureSchema, columns: Mapping[str, Sequence], row_ids: Sequence[str] | None = None
    ) -> "Dataset":
        """Build from per-column python values; ``None`` or NaN marks a missing cell.

        Categorical/group columns take category strings.
        """
        n = len(next(iter(columns.values())))
        values = np.zeros((n, len(schema.columns)))
        missing = np.zeros((n, len(schema.columns)), dtype=bool)
        for j, col in enumerate(schema.columns):
            if col.name not in columns:
                raise SchemaError(f"missing column {col.name!r}")
            raw = list(columns[col.name])
            if len(raw) != n:
                raise SchemaError(f"column {col.name!r} has {len(raw)} cells, expected {n}")
            for i, cell in enumerate(raw):
                if cell is None or (isinstance(cell, float) and math.isnan(cell)) or cell == "":
                    missing[i, j] = True
                elif col.is_categorical:
                    if str(cell) not in col.categories:
                        raise SchemaError(f"value {cell!r} not in vocabulary of {col.name!r}")
                    values[i, j] = col.code(cell)
                else:
                    values[i, j] = float(cell)
        if row_ids is None:
            row_ids = [f"r{i:06d}" for i in range(n)]
        return cls(schema, values, missing, row_ids)

    # -- access -------------------------------------------------------
    def column_values(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def column_missing(self, name: str) -> np.ndarray:
        return self.missing[:, self.schema.index(name)]

    def categories_of(self, name: str) -> list[str | None]:
        col = self.schema.column(name)
        if not col.is_categorical:
            raise SchemaError(f"{name!r} is not categorical")
        v, m = self.column_values(name), self.column_missing(name)
        return [None if mi else col.categories[int(vi)] for vi, mi in zip(v, m)]

    @property
    def labels(self) -> np.ndarray:
        return self.column_values(self.schema.label)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(self.schema, self.values[idx], self.missing[idx], [self.row_ids[i] for i in idx])

    def select_ids(self, ids: Iterable[str]) -> "Dataset":
        pos = {r: i for i, r in enumerate(self.row_ids)}
        return self.take([pos[r] for r in ids])

    def concat(self, other: "Dataset") -> "Dataset":
        if other.schema != self.schema:
            raise SchemaError("cannot concatenate datasets with different schemas")
        return Dataset(
            self.schema,
            np.vstack([self.values, other.values]),
            np.vstack([self.missing, other.missing]),
            self.row_ids + other.row_ids,
        )

    def with_schema(self, schema: FeatureSchema) -> "Dataset":
        return Dataset(schema, self.values, self.missing, self.row_ids)

    # -- serialization -----------------------------------------------
    def to_csv(self, path) -> None:
        """Write to a path or an open text stream."""
        if hasattr(path, "write"):
            self._write_csv(path)
            return
        with open(path, "w", newline="") as fh:
            self._write_csv(fh)

    def _write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([self.schema.id_column] + self.schema.names)
        for i, rid in enumerate(self.row_ids):
            row = [rid]
            for j, col in enumerate(self.schema.columns):
                if self.missing[i, j]:
                    row.append("")
                elif col.is_categorical:
                    row.append(col.categories[int(self.values[i, j])])
                else:
                    row.append(repr(float(self.values[i, j])))
            w.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path, schema: FeatureSchema) -> "Dataset":
        """Read a CSV whose header names the columns; empty strings are missing.

        Row ids come from ``schema.id_column`` when that column is present,
        otherwise from the 0-based line number.
        """
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise SchemaError(f"{path}: no data rows")
        header = rows[0].keys()
        absent = [n for n in schema.names if n not in header]
        if absent:
            raise SchemaError(f"{path}: missing columns {absent}")
        cols = {n: [r[n] for r in rows] for n in schema.names}
        ids = [r[schema.id_column] for r in rows] if schema.id_column in header else None
        return cls.from_columns(schema, cols, ids)


def digest_ids(ids: Iterable[str]) -> str:
    """Order-independent SHA-256 digest of a row-id set."""
    h = hashlib.sha256()
    for rid in sorted(ids):
        h.update(rid.encode())
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class GroupedDataset:
    source: Dataset
    target: Dataset | None = None

    def __post_init__(self):
        if self.target is not None:
            if self.target.schema != self.source.schema:
                raise SchemaError("source and target schemas differ")
            if set(self.source.row_ids) & set(self.target.row_ids):
                raise SchemaError("source and target share row ids")

    @property
    def m(self) -> int:
        return len(self.source)

    @property
    def n(self) -> int:
        return 0 if self.target is None else len(self.target)

    @property
    def schema(self) -> FeatureSchema:
        return self.source.schema

    def pooled(self) -> tuple[Dataset, np.ndarray]:
        """Source rows followed by target rows, plus the boolean target mask."""
        if self.target is None:
            return self.source, np.zeros(self.m, dtype=bool)
        return self.source.concat(self.target), np.r_[np.zeros(self.m, bool), np.ones(self.n, bool)]

    @classmethod
    def from_groups(cls, data: Dataset, attribute: str, source: str, target: str) -> "GroupedDataset":
        parts = group_partition(data, attribute)
        for g in (source, target):
            if g not in parts:
                raise SchemaError(f"group {g!r} absent from attribute {attribute!r}; have {sorted(parts)}")
        return cls(parts[source], parts[target])


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of row ids to folds.

    Non-negative indices are (inner) folds; ``TEST_FOLD`` marks held-out test
    rows and ``UNUSED_FOLD`` rows deliberately left out of both.
    """

    k_folds: int
    assignments: Mapping[str, int]
    stratify_on: str
    seed: int
    target_fraction: float | None = None
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "assignments", MappingProxyType(dict(self.assignments)))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def fold_ids(self, fold: int) -> list[str]:
        return [r for r, f in self.assignments.items() if f == fold]

    def train_ids(self) -> list[str]:
        return [r for r, f in self.assignments.items() if f >= 0]

    def test_ids(self) -> list[str]:
        return self.fold_ids(TEST_FOLD)

    def folds(self) -> list[list[str]]:
        return [self.fold_ids(i) for i in range(self.k_folds)]

    def to_dict(self) -> dict:
        return {
            "k_folds": self.k_folds,
            "stratify_on": self.stratify_on,
            "seed": self.seed,
            "target_fraction": self.target_fraction,
            "params": dict(self.params),
            "assignments": dict(sorted(self.assignments.items())),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldPlan":
        return cls(
            d["k_folds"], d["assignments"], d["stratify_on"], d["seed"], d.get("target_fraction"), d.get("params", {})
        )


def label_strata(labels: np.ndarray, task: str) -> np.ndarray:
    """Stratum per row: the class for classification, label quintile for regression."""
    labels = np.asarray(labels, dtype=float)
    if task == "classification":
        return labels.astype(int)
    edges = np.quantile(labels, [0.2, 0.4, 0.6, 0.8])
    return np.searchsorted(edges, labels, side="right")


def _assign_folds(ids: Sequence[str], strata: np.ndarray, k: int, rng: np.random.Generator) -> dict[str, int]:
    # Members are ordered by id before shuffling so the result ignores input row order.
    order: list[str] = []
    for s in np.unique(strata):
        members = sorted(ids[i] for i in np.flatnonzero(strata == s))
        order.extend(members[i] for i in rng.permutation(len(members)))
    return {rid: pos % k for pos, rid in enumerate(order)}


def stratified_split(data: Dataset, k: int, label_col: str | None = None, seed: int = 0) -> FoldPlan:
    """Partition rows into ``k`` label-stratified folds of near-equal size."""
    if k < 2:
        raise SplitError("k must be at least 2")
    label_col = label_col or data.schema.label
    strata = label_strata(data.column_values(label_col), data.schema.task)
    if data.schema.task == "classification":
        classes, counts = np.unique(strata, return_counts=True)
        for c, cnt in zip(classes, counts):
            if cnt < k:
                raise SplitError(f"label class {c} has {cnt} members, fewer than k={k}")
    assignments = _assign_folds(data.row_ids, strata, k, np.random.default_rng(seed))
    return FoldPlan(k, assignments, label_col, seed, None, {"kind": "stratified", "n_rows": len(data)})


def _choose_stratified(ids: Sequence[str], strata: np.ndarray, count: int, rng) -> list[str]:
    """Pick ``count`` ids, allocating picks to strata by largest remainder."""
    if count >= len(ids):
        return list(ids)
    levels, sizes = np.unique(strata, return_counts=True)
    quota = count * sizes / sizes.sum()
    alloc = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - alloc), kind="stable")[: count - alloc.sum()]:
        alloc[i] += 1
    chosen: list[str] = []
    for level, a in zip(levels, alloc):
        members = sorted(ids[i] for i in np.flatnonzero(strata == level))
        chosen.extend(members[i] for i in rng.permutation(len(members))[:a])
    return chosen


def adaptation_split(
    pair: GroupedDataset,
    k: int,
    target_fraction: float,
    seed: int = 0,
    *,
    candidates: Sequence[str] | None = None,
    strict_paper_splits: bool = False,
) -> FoldPlan:
    """Train/test plan for adapting from source to target.

    Train holds every source row plus ``target_fraction`` of the target rows
    (drawn, stratified by label, from ``candidates`` when given); the train
    rows are divided into ``k`` inner folds with an equal (+-1) number of
    target rows each. The remaining target rows are the test set, except that
    with ``strict_paper_splits`` unpicked candidates are marked unused.
    """
    if not 0.0 <= target_fraction <= 1.0:
        raise SplitError(f"target_fraction must lie in [0, 1], got {target_fraction}")
    if k < 2:
        raise SplitError("k must be at least 2")
    schema = pair.schema
    rng = np.random.default_rng(seed)
    target = pair.target
    if target_fraction > 0:
        if target is None or pair.n == 0:
            raise SplitError("target_fraction > 0 requires target rows")
        if schema.task == "classification":
            classes, counts = np.unique(target.labels.astype(int), return_counts=True)
            for c, cnt in zip(classes, counts):
                if cnt < k:
                    raise SplitError(f"target label class {c} has {cnt} rows, fewer than k={k}")

    included: list[str] = []
    if target is not None and target_fraction > 0:
        pool = target if candidates is None else target.select_ids(candidates)
        count = int(round(target_fraction * pair.n))
        included = _choose_stratified(pool.row_ids, label_strata(pool.labels, schema.task), count, rng)

    assignments: dict[str, int] = {}
    src_strata = label_strata(pair.source.labels, schema.task)
    assignments.update(_assign_folds(pair.source.row_ids, src_strata, k, rng))
    if included:
        inc = target.select_ids(included)
        assignments.update(_assign_folds(inc.row_ids, label_strata(inc.labels, schema.task), k, rng))
    if target is not None:
        inc_set = set(included)
        cand_set = set(candidates) if candidates is not None else set()
        for rid in target.row_ids:
            if rid in inc_set:
                continue
            unused = strict_paper_splits and rid in cand_set
            assignments[rid] = UNUSED_FOLD if unused else TEST_FOLD
    return FoldPlan(
        k,
        assignments,
        schema.label,
        seed,
        target_fraction,
        {"kind": "adaptation", "m": pair.m, "n": pair.n, "n_target_train": len(included),
         "strict_paper_splits": strict_paper_splits},
    )


def group_partition(data: Dataset, attribute: str) -> dict[str, Dataset]:
    """Split rows by the value of a group-attribute column; missing values go to ``"unknown"``."""
    try:
        col = data.schema.column(attribute)
    except SchemaError:
        raise SchemaError(f"unknown column {attribute!r}") from None
    if col.kind is not ColumnKind.GROUP:
        raise SchemaError(f"{attribute!r} is not a group-attribute column")
    codes = data.column_values(attribute).astype(int)
    codes = np.where(data.column_missing(attribute), col.code(UNKNOWN), codes)
    out = {}
    for code, name in enumerate(col.categories):
        idx = np.flatnonzero(codes == code)
        if idx.size:
            out[name] = data.take(idx)
    return out


def _rebuild_dataset(schema, values, missing, row_ids):
    # Unpickling path: the cells were validated when first built.
    d = object.__new__(Dataset)
    object.__setattr__(d, "schema", schema)
    object.__setattr__(d, "values", _frozen(values))
    object.__setattr__(d, "missing", _frozen(missing))
    object.__setattr__(d, "row_ids", tuple(row_ids))
    return d
