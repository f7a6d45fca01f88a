"""Fit/transform feature preparation.

Continuous columns are median-imputed, then z-scored, or mapped through a
standard-normal quantile transform when strongly skewed. Categorical columns
get an ``unknown`` category for missing or unseen values, and each feature
with missing fit values gains a 0/1 missingness indicator column.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import stats

from .data import UNKNOWN, Column, ColumnKind, Dataset, FeatureSchema, SchemaError, digest_ids

log = logging.getLogger(__name__)

INDICATOR_SUFFIX = "__missing"


@dataclass(frozen=True)
class ContinuousStats:
    median: float
    mean: float
    std: float
    use_quantile: bool
    knots: tuple[float, ...] = ()
    levels: tuple[float, ...] = ()


@dataclass(frozen=True)
class PreprocessorState:
    input_schema: FeatureSchema
    continuous: Mapping[str, ContinuousStats]
    vocabularies: Mapping[str, tuple[str, ...]]
    indicator_columns: tuple[str, ...]
    dropped: Mapping[str, str]
    skew_threshold: float
    fit_rows_digest: str
    n_fit_rows: int

    @property
    def output_schema(self) -> FeatureSchema:
        cols = []
        for col in self.input_schema.columns:
            if col.name in self.dropped:
                continue
            if col.kind is ColumnKind.CATEGORICAL:
                cols.append(Column(col.name, col.kind, self.vocabularies[col.name]))
            else:
                cols.append(col)
        cols += [Column(name + INDICATOR_SUFFIX, ColumnKind.CONTINUOUS) for name in self.indicator_columns]
        return FeatureSchema(tuple(cols), self.input_schema.task, self.input_schema.id_column, preprocessed=True)

    def to_dict(self) -> dict:
        return {
            "input_schema": self.input_schema.to_dict(),
            "continuous": {
                k: {"median": s.median, "mean": s.mean, "std": s.std, "use_quantile": s.use_quantile,
                    "knots": list(s.knots), "levels": list(s.levels)}
                for k, s in self.continuous.items()
            },
            "vocabularies": {k: list(v) for k, v in self.vocabularies.items()},
            "indicator_columns": list(self.indicator_columns),
            "dropped": dict(self.dropped),
            "skew_threshold": self.skew_threshold,
            "fit_rows_digest": self.fit_rows_digest,
            "n_fit_rows": self.n_fit_rows,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PreprocessorState":
        return cls(
            input_schema=FeatureSchema.from_dict(d["input_schema"]),
            continuous={
                k: ContinuousStats(v["median"], v["mean"], v["std"], v["use_quantile"], tuple(v["knots"]), tuple(v["levels"]))
                for k, v in d["continuous"].items()
            },
            vocabularies={k: tuple(v) for k, v in d["vocabularies"].items()},
            indicator_columns=tuple(d["indicator_columns"]),
            dropped=dict(d["dropped"]),
            skew_threshold=d["skew_threshold"],
            fit_rows_digest=d["fit_rows_digest"],
            n_fit_rows=d["n_fit_rows"],
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "PreprocessorState":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TransformDiagnostics:
    unseen_categories: dict[str, int] = field(default_factory=dict)


def _quantile_knots(x: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    knots, counts = np.unique(x, return_counts=True)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    mid_rank = before + (counts + 1) / 2.0
    levels = mid_rank / (x.size + 1)
    return tuple(knots.tolist()), tuple(levels.tolist())


def quantile_normalize(knots, levels, x):
    """Map ``x`` to the standard-normal quantile of its interpolated empirical CDF level.

    Values outside the knot range are clamped to the end levels.
    """
    knots = np.asarray(knots, dtype=float)
    levels = np.asarray(levels, dtype=float)
    if knots.size == 1:
        return stats.norm.ppf(np.full_like(np.asarray(x, dtype=float), levels[0]))
    return stats.norm.ppf(np.interp(x, knots, levels))


def fit(data: Dataset, skew_threshold: float = 1.0) -> PreprocessorState:
    """Learn imputation, scaling and vocabulary statistics from ``data`` only."""
    schema = data.schema
    if schema.preprocessed:
        raise SchemaError("data is already preprocessed")
    continuous: dict[str, ContinuousStats] = {}
    vocab: dict[str, tuple[str, ...]] = {}
    dropped: dict[str, str] = {}
    indicators: list[str] = []
    for col in schema.feature_columns:
        v, miss = data.column_values(col.name), data.column_missing(col.name)
        if miss.all():
            dropped[col.name] = "all values missing"
            log.warning("dropping column %r: all values missing in fit data", col.name)
            continue
        if miss.any():
            indicators.append(col.name)
        if col.kind is ColumnKind.CATEGORICAL:
            seen = set(v[~miss].astype(int).tolist())
            cats = tuple(c for i, c in enumerate(col.categories) if i in seen and c != UNKNOWN)
            vocab[col.name] = cats + (UNKNOWN,)
            continue
        present = v[~miss]
        median = float(np.median(present))
        imputed = np.where(miss, median, v)
        std = float(np.std(imputed, ddof=1)) if imputed.size > 1 else 0.0
        if not std > 0:
            dropped[col.name] = "zero variance"
            log.warning("dropping column %r: zero variance in fit data", col.name)
            continue
        skew = float(stats.skew(present)) if present.size > 2 else 0.0
        use_q = bool(abs(skew) > skew_threshold)
        knots, levels = _quantile_knots(imputed) if use_q else ((), ())
        continuous[col.name] = ContinuousStats(median, float(np.mean(imputed)), std, use_q, knots, levels)
    indicators = sorted(c for c in indicators if c not in dropped)
    return PreprocessorState(
        input_schema=schema,
        continuous=continuous,
        vocabularies=vocab,
        indicator_columns=tuple(indicators),
        dropped=dropped,
        skew_threshold=skew_threshold,
        fit_rows_digest=digest_ids(data.row_ids),
        n_fit_rows=len(data),
    )


def transform(state: PreprocessorState, data: Dataset, return_diagnostics: bool = False):
    """Apply a fitted state; the output has no missing cells."""
    if data.schema.preprocessed:
        raise SchemaError("data is already preprocessed; refusing to transform twice")
    if data.schema.names != state.input_schema.names or data.schema.task != state.input_schema.task:
        raise SchemaError("data schema differs from the schema the preprocessor was fitted on")
    out_schema = state.output_schema
    diag = TransformDiagnostics()
    cols: list[np.ndarray] = []
    for col in data.schema.columns:
        if col.name in state.dropped:
            continue
        v, miss = data.column_values(col.name), data.column_missing(col.name)
        if col.kind is ColumnKind.CONTINUOUS:
            s = state.continuous[col.name]
            x = np.where(miss, s.median, v)
            x = quantile_normalize(s.knots, s.levels, x) if s.use_quantile else (x - s.mean) / s.std
        elif col.kind is ColumnKind.CATEGORICAL:
            vocab = state.vocabularies[col.name]
            lookup = {col.categories.index(c): i for i, c in enumerate(vocab)}
            unk = vocab.index(UNKNOWN)
            x = np.full(v.shape, float(unk))
            n_unseen = 0
            for i, (code, m) in enumerate(zip(v.astype(int), miss)):
                if m:
                    continue
                if code in lookup:
                    x[i] = lookup[code]
                else:
                    n_unseen += 1
            if n_unseen:
                diag.unseen_categories[col.name] = n_unseen
        elif col.kind is ColumnKind.GROUP:
            x = np.where(miss, col.code(UNKNOWN), v)
        else:
            x = v
        cols.append(np.asarray(x, dtype=float))
    for name in state.indicator_columns:
        cols.append(data.column_missing(name).astype(float))
    values = np.column_stack(cols)
    out = Dataset(out_schema, values, np.zeros_like(values, dtype=bool), data.row_ids)
    return (out, diag) if return_diagnostics else out


def fit_transform(data: Dataset, skew_threshold: float = 1.0) -> tuple[PreprocessorState, Dataset]:
    state = fit(data, skew_threshold)
    return state, transform(state, data)
