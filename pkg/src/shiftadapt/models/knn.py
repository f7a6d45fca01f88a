"""Weighted k-nearest-neighbour prediction on preprocessed features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import Features


@dataclass(frozen=True)
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    k: int
    task: str
    vocab_sizes: tuple[int, ...]
    n_numeric: int


def knn_fit(feats: Features, y, weights, k: int = 5, task: str = "classification") -> KnnModel:
    """Store the positively weighted training rows; zero-weight rows cannot vote."""
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > keep.sum():
        raise ValueError(f"k={k} exceeds the {int(keep.sum())} weighted training rows")
    return KnnModel(feats.one_hot()[keep], np.asarray(y, float)[keep], w[keep], k, task,
                    feats.vocab_sizes, feats.n_numeric)


def knn_predict(model: KnnModel, feats: Features) -> np.ndarray:
    """Weight-averaged neighbour labels: a probability for classification, a mean for regression."""
    if feats.n_numeric != model.n_numeric or feats.vocab_sizes != model.vocab_sizes:
        raise ValueError("feature layout differs from the training features")
    Q = feats.one_hot()
    out = np.empty(len(Q))
    sq_train = (model.X ** 2).sum(axis=1)
    for start in range(0, len(Q), 1024):
        q = Q[start:start + 1024]
        d2 = (q ** 2).sum(axis=1)[:, None] + sq_train[None, :] - 2.0 * q @ model.X.T
        nn = np.argsort(np.maximum(d2, 0.0), axis=1, kind="stable")[:, : model.k]
        wn = model.w[nn]
        out[start:start + 1024] = (wn * model.y[nn]).sum(axis=1) / wn.sum(axis=1)
    return out
