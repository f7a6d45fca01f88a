"""Random forest base learner honouring per-sample weights.

Tree induction is delegated to scikit-learn (weighted Gini / squared-error
splits, per-tree bootstrap, per-split feature subsampling).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

from .base import Features


@dataclass(frozen=True)
class ForestModel:
    estimator: object
    task: str
    constant: float | None
    vocab_sizes: tuple[int, ...]
    n_numeric: int


def forest_train(feats: Features, y, weights, task: str = "classification", n_trees: int = 100,
                 max_depth: int | None = None, max_features="sqrt", bootstrap: bool = True,
                 min_samples_leaf: int = 1, seed: int = 0) -> ForestModel:
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    X, yk, wk = feats.one_hot()[keep], np.asarray(y, float)[keep], w[keep]
    if X.shape[0] == 0:
        raise ValueError("no positively weighted training rows")
    if task == "classification" and np.unique(yk).size == 1:
        return ForestModel(None, task, float(yk[0]), feats.vocab_sizes, feats.n_numeric)
    cls = RandomForestClassifier if task == "classification" else RandomForestRegressor
    est = cls(n_estimators=n_trees, max_depth=max_depth, max_features=max_features, bootstrap=bootstrap,
              min_samples_leaf=min_samples_leaf, random_state=seed, n_jobs=1)
    est.fit(X, yk if task == "regression" else yk.astype(int), sample_weight=wk / wk.mean())
    return ForestModel(est, task, None, feats.vocab_sizes, feats.n_numeric)


def forest_predict(model: ForestModel, feats: Features) -> np.ndarray:
    if feats.n_numeric != model.n_numeric or feats.vocab_sizes != model.vocab_sizes:
        raise ValueError("feature layout differs from the training features")
    if model.constant is not None:
        return np.full(len(feats), model.constant)
    X = feats.one_hot()
    if model.task == "classification":
        return model.estimator.predict_proba(X)[:, list(model.estimator.classes_).index(1)]
    return model.estimator.predict(X)
