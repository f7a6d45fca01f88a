"""Secondary analyses on top of a frozen primary model.

* Transfer to a related binary task: a one-dimensional LDA on the primary
  model's (uncalibrated) probability, fitted on a small labelled share.
* Brain-age-residual correlations with external scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from ._parallel import derive_seed
from .data import Dataset, digest_ids, stratified_split
from .evaluation.cv import FoldResult, MetricReport
from .evaluation.metrics import UndefinedMetricError, auc, pearson


@dataclass(frozen=True)
class LdaModel1D:
    means: tuple[float, float]
    variance: float
    priors: tuple[float, float]

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("pooled variance must be > 0")
        if min(self.priors) <= 0 or not math.isclose(sum(self.priors), 1.0):
            raise ValueError("priors must be positive and sum to one")

    @property
    def threshold(self) -> float | None:
        """Covariate value where the two posteriors are equal; ``None`` when the class means coincide."""
        m0, m1 = self.means
        if m0 == m1:
            return None
        return (m0 + m1) / 2.0 + self.variance * math.log(self.priors[0] / self.priors[1]) / (m1 - m0)

    def log_odds(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m0, m1 = self.means
        return ((m1 - m0) * x - (m1 * m1 - m0 * m0) / 2.0) / self.variance + math.log(self.priors[1] / self.priors[0])

    def posterior(self, x) -> np.ndarray:
        """P(class 1 | x)."""
        return expit(self.log_odds(x))

    def predict(self, x) -> np.ndarray:
        return (self.log_odds(x) > 0).astype(int)


def lda_fit_1d(covariate, labels, priors: str | tuple[float, float] = "empirical") -> LdaModel1D:
    """Gaussian class-conditionals with a shared variance (pooled, ``n - 2`` denominator).

    ``priors`` is ``"empirical"`` (class frequencies), ``"uniform"`` or an explicit pair.
    """
    x, y = np.asarray(covariate, dtype=float), np.asarray(labels)
    if x.shape != y.shape:
        raise ValueError("covariate and labels differ in length")
    x0, x1 = x[y == 0], x[y == 1]
    if x0.size + x1.size != y.size:
        raise ValueError("labels must be 0/1")
    if x0.size < 2 or x1.size < 2:
        raise ValueError("each class needs at least two samples")
    # Constant classes would otherwise leave a rounding-sized variance.
    var = 0.0 if np.ptp(x0) == 0 and np.ptp(x1) == 0 else \
        (((x0 - x0.mean()) ** 2).sum() + ((x1 - x1.mean()) ** 2).sum()) / (y.size - 2)
    if not var > 0:
        raise ValueError("pooled variance is zero; LDA is degenerate")
    if priors == "empirical":
        pri = (x0.size / y.size, x1.size / y.size)
    elif priors == "uniform":
        pri = (0.5, 0.5)
    else:
        pri = tuple(float(p) for p in priors)
    return LdaModel1D((float(x0.mean()), float(x1.mean())), float(var), pri)


def secondary_transfer_eval(model, data: Dataset, label_fraction: float = 0.2, folds: int = 5, seed: int = 0,
                            priors: str | tuple[float, float] = "empirical") -> MetricReport:
    """Per fold: fit the LDA on one fold of labels over the frozen model's probabilities; AUC on the rest.

    ``model`` needs ``predict(Dataset) -> probabilities`` and ``digest()``;
    it is never refitted, which the before/after digest check confirms.
    """
    if not 0 < label_fraction < 1:
        raise ValueError("label_fraction must lie in (0, 1)")
    before = model.digest()
    probs = np.asarray(model.predict(data), dtype=float)
    y = data.labels.astype(int)
    ids = list(data.row_ids)
    index = {r: i for i, r in enumerate(ids)}
    plan = stratified_split(data, folds, seed=derive_seed(seed, 7))
    out = []
    for o in range(folds):
        fit_idx = np.array(sorted(index[r] for r in plan.fold_ids(o)))
        test_idx = np.setdiff1d(np.arange(len(ids)), fit_idx)
        note, value = "", None
        try:
            lda = lda_fit_1d(probs[fit_idx], y[fit_idx], priors)
            scores = lda.posterior(probs[test_idx])
        except ValueError as exc:
            # A constant covariate carries no ranking; every pair ties.
            note = f"degenerate: {exc}"
            scores = np.zeros(test_idx.size)
        try:
            value = auc(scores, y[test_idx])
        except UndefinedMetricError as exc:
            note = f"undefined: {exc}"
        out.append(FoldResult(o, value, None, {"priors": priors if isinstance(priors, str) else list(priors)},
                              0, int(fit_idx.size), int(test_idx.size), digest_ids(ids[i] for i in fit_idx),
                              digest_ids(ids[i] for i in test_idx), note))
    if model.digest() != before:
        raise RuntimeError("primary model changed during secondary evaluation")
    spec = {"kind": "secondary_transfer", "label_fraction": label_fraction, "folds": folds, "seed": seed,
            "model_digest": before}
    return MetricReport(spec, "auc", out)


@dataclass(frozen=True)
class BarRecord:
    row_id: str
    predicted_age: float
    chronological_age: float

    @property
    def residual(self) -> float:
        return self.predicted_age - self.chronological_age


def bar_analysis(records: Sequence[BarRecord], covariates: Mapping[str, Sequence],
                 expected_signs: Mapping[str, int] | None = None) -> list[dict]:
    """Pearson r and p between the residual and each covariate, in covariate order.

    Covariate lists align with ``records``; ``None``/NaN entries drop that
    pair. Expected signs come from the caller and are only annotated.
    """
    resid = np.array([r.residual for r in records], dtype=float)
    expected_signs = expected_signs or {}
    rows = []
    for name, vals in covariates.items():
        v = np.array([np.nan if c is None else float(c) for c in vals])
        if v.size != resid.size:
            raise ValueError(f"covariate {name!r} has {v.size} values for {resid.size} records")
        keep = ~np.isnan(v)
        row = {"name": name, "n": int(keep.sum()), "r": None, "p": None, "undefined": False,
               "expected_sign": expected_signs.get(name), "sign_matches": None}
        if keep.sum() < 3:
            row["undefined"] = True
        else:
            try:
                r, p = pearson(resid[keep], v[keep])
                row["r"], row["p"] = r, p
                if row["expected_sign"] is not None:
                    row["sign_matches"] = bool(np.sign(r) == np.sign(row["expected_sign"]))
            except UndefinedMetricError:
                row["undefined"] = True
        rows.append(row)
    return rows
