"""Reporting metrics: AUC, MAE, group-fairness gaps, Pearson correlation and paired fold tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Hashable, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (single class, zero variance, ...)."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n1, n0 = int(pos.sum()), int((y == 0).sum())
    if n1 + n0 != y.size:
        raise ValueError("labels must be 0/1")
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = stats.rankdata(s)
    # Rank sums of half-integers are exact in binary floating point.
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def mae(predictions, targets) -> float:
    p, t = np.asarray(predictions, dtype=float), np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in length")
    if p.size == 0:
        raise ValueError("mae of an empty sample")
    return float(np.abs(p - t).mean())


def score(task: str, predictions, labels) -> float:
    """Higher-is-better selection score: AUC, or negative MAE for regression."""
    return auc(predictions, labels) if task == "classification" else -mae(predictions, labels)


@dataclass(frozen=True)
class FairnessGap:
    value: float
    rates: dict
    excluded: dict


def _groups(groups, categories):
    g = np.asarray(groups, dtype=object)
    names = list(dict.fromkeys(g.tolist())) if categories is None else list(categories)
    return g, names


def dpd(predictions, groups, categories: Sequence[Hashable] | None = None, detail: bool = False):
    """Largest pairwise gap in positive-prediction rate across groups."""
    yhat = np.asarray(predictions)
    g, names = _groups(groups, categories)
    rates, excluded = {}, {}
    for name in names:
        sel = g == name
        if not sel.any():
            excluded[name] = "empty group"
            continue
        rates[name] = float(yhat[sel].mean())
    if len(rates) < 2:
        raise UndefinedMetricError("DPD needs at least two nonempty groups")
    value = max(abs(rates[a] - rates[b]) for a, b in combinations(rates, 2))
    return FairnessGap(value, rates, excluded) if detail else value


def eod(predictions, labels, groups, categories: Sequence[Hashable] | None = None, detail: bool = False):
    """Largest pairwise ``max(|dTPR|, |dFPR|)`` across groups that contain both classes."""
    yhat, y = np.asarray(predictions), np.asarray(labels)
    g, names = _groups(groups, categories)
    rates, excluded = {}, {}
    for name in names:
        sel = g == name
        pos, neg = sel & (y == 1), sel & (y == 0)
        if not pos.any() or not neg.any():
            excluded[name] = "group lacks a label class"
            log.info("eod: excluding group %r (lacks a label class)", name)
            continue
        rates[name] = (float(yhat[pos].mean()), float(yhat[neg].mean()))
    if len(rates) < 2:
        raise UndefinedMetricError("EOD needs at least two groups containing both classes")
    value = max(max(abs(rates[a][0] - rates[b][0]), abs(rates[a][1] - rates[b][1]))
                for a, b in combinations(rates, 2))
    return FairnessGap(value, rates, excluded) if detail else value


def pearson(x, y) -> tuple[float, float]:
    """Product-moment correlation and its two-sided t-test p-value."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y differ in length")
    n = x.size
    if n < 3:
        raise ValueError("pearson needs at least three pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("zero variance")
    r = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


@dataclass(frozen=True)
class PairedTest:
    p_value: float
    statistic: float
    mean_difference: float
    degenerate: bool = False


def paired_significance(a, b) -> PairedTest:
    """Two-sided paired t-test over fold-level metrics.

    Zero-variance differences are flagged degenerate with p = 1 when all
    differences vanish and p = 0 otherwise.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired vectors must be 1-D and equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    if np.all(d == d[0]):
        return PairedTest(1.0 if d[0] == 0 else 0.0, float("nan") if d[0] == 0 else float(np.sign(d[0]) * np.inf),
                          mean, True)
    res = stats.ttest_rel(a, b)
    return PairedTest(float(res.pvalue), float(res.statistic), mean)
