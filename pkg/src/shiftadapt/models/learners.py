"""Uniform fit/predict surface over the base-learner zoo.

Every learner receives per-sample weights, so the alpha-weighted objective is
honoured by gradient-trained models (weighted loss), k-NN (weighted votes)
and forests (weighted splits) alike.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Mapping

import numpy as np

from . import erm
from .base import Features, LinearConfig, MlpConfig, OptimizerSpec, RegularizerSpec, TrainConfig
from .forest import forest_predict, forest_train
from .knn import knn_fit, knn_predict

KINDS = ("linear", "mlp", "knn", "forest", "constant")

_MLP_KEYS = ("widths", "dropout", "batch_norm", "skip", "embedding_dims")


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    options: Mapping[str, Any] = field(default_factory=dict)
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "options", dict(self.options))
        if self.name is None:
            object.__setattr__(self, "name", self.kind)

    def with_options(self, **kw) -> "LearnerSpec":
        return LearnerSpec(self.kind, {**self.options, **kw}, self.name)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "options": dict(self.options)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnerSpec":
        return cls(d["kind"], d.get("options", {}), d.get("name"))

    def train_config(self, task: str, seed: int) -> TrainConfig:
        o = self.options
        if self.kind == "linear":
            opt = OptimizerSpec("lbfgs", seed=seed, max_iter=o.get("max_iter", 500), tol=o.get("tol", 1e-8))
            reg = o.get("l2", 1e-3)
        else:
            opt = OptimizerSpec(o.get("optimizer", "adam"), step_size=o.get("step_size", 1e-3),
                                batch_size=o.get("batch_size", 128), epochs=o.get("epochs", 30), seed=seed)
            reg = o.get("l2", 1e-4)
        return TrainConfig(alpha=0.0, regularizer=RegularizerSpec("l2", reg), optimizer=opt, task=task)

    def model_config(self):
        if self.kind == "linear":
            return LinearConfig()
        return MlpConfig(**{k: self.options[k] for k in _MLP_KEYS if k in self.options})

    def fit(self, feats: Features, y, weights, task: str, seed: int = 0, is_target=None) -> "FittedLearner":
        y = np.asarray(y, dtype=float)
        w = np.asarray(weights, dtype=float)
        o = self.options
        if self.kind in ("linear", "mlp"):
            model = erm.fit_weighted(feats, y, w, self.model_config(), self.train_config(task, seed), is_target)
        elif self.kind == "knn":
            model = knn_fit(feats, y, w, k=o.get("k", 15), task=task)
        elif self.kind == "forest":
            model = forest_train(feats, y, w, task, n_trees=o.get("n_trees", 50), max_depth=o.get("max_depth"),
                                 max_features=o.get("max_features", "sqrt"), bootstrap=o.get("bootstrap", True),
                                 min_samples_leaf=o.get("min_samples_leaf", 3), seed=seed)
        else:
            model = float(o["value"]) if "value" in o else float(w @ y / w.sum())
        return FittedLearner(self, task, model, feats.n_numeric, feats.vocab_sizes)


@dataclass(frozen=True)
class FittedLearner:
    spec: LearnerSpec
    task: str
    model: Any
    n_numeric: int
    vocab_sizes: tuple[int, ...]

    def predict(self, feats: Features) -> np.ndarray:
        if feats.n_numeric != self.n_numeric or feats.vocab_sizes != self.vocab_sizes:
            raise ValueError(
                f"{self.spec.name}: expected {self.n_numeric} numeric features and vocab {self.vocab_sizes}, "
                f"got {feats.n_numeric} and {feats.vocab_sizes}"
            )
        kind = self.spec.kind
        if kind in ("linear", "mlp"):
            return erm.predict(self.model, feats)
        if kind == "knn":
            return knn_predict(self.model, feats)
        if kind == "forest":
            return forest_predict(self.model, feats)
        return np.full(len(feats), self.model)

    def digest(self) -> str:
        if self.spec.kind in ("linear", "mlp"):
            return self.model.digest()
        h = hashlib.sha256()
        _feed(h, self.model)
        return h.hexdigest()


def _feed(h, obj) -> None:
    # Content hash; pickle bytes depend on object identity and differ across processes.
    if isinstance(obj, np.ndarray):
        h.update(f"nd{obj.dtype.str}{obj.shape}".encode())
        if obj.dtype.hasobject:
            for v in obj.ravel():
                _feed(h, v)
        else:
            h.update(np.ascontiguousarray(obj).tobytes())
    elif is_dataclass(obj):
        h.update(type(obj).__name__.encode())
        for f in fields(obj):
            h.update(f.name.encode())
            _feed(h, getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        h.update(f"seq{len(obj)}".encode())
        for v in obj:
            _feed(h, v)
    elif isinstance(obj, dict):
        h.update(f"map{len(obj)}".encode())
        for k in sorted(obj, key=repr):
            _feed(h, k)
            _feed(h, obj[k])
    elif hasattr(obj, "estimators_"):
        h.update(type(obj).__name__.encode())
        _feed(h, {k: v for k, v in obj.get_params().items()})
        _feed(h, getattr(obj, "classes_", None))
        for tree in obj.estimators_:
            state = tree.tree_.__getstate__()
            _feed(h, [state["nodes"].view(np.uint8), state["values"]])
    else:
        h.update(repr(obj).encode())
