"""Parameter containers, training configuration and the feature blocks models consume."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..data import ColumnKind, Dataset, SchemaError


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """The objective became non-finite; ``last_params`` holds the last finite checkpoint."""

    def __init__(self, message: str, last_params: "ModelParams | None" = None, epoch: int = -1):
        super().__init__(message)
        self.last_params = last_params
        self.epoch = epoch


@dataclass(frozen=True)
class Features:
    """Numeric block plus integer-coded categorical block of a preprocessed table."""

    numeric: np.ndarray
    categorical: np.ndarray
    vocab_sizes: tuple[int, ...]

    def __post_init__(self):
        num = np.ascontiguousarray(self.numeric, dtype=np.float64)
        cat = np.asarray(self.categorical, dtype=np.int64).reshape(num.shape[0], -1)
        object.__setattr__(self, "numeric", num.reshape(num.shape[0], -1))
        object.__setattr__(self, "categorical", cat)
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if cat.shape[1] != len(self.vocab_sizes):
            raise SchemaError("one vocabulary size per categorical column required")
        if not np.all(np.isfinite(self.numeric)):
            raise SchemaError("numeric features must be finite (preprocess first)")

    def __len__(self) -> int:
        return self.numeric.shape[0]

    @property
    def n_numeric(self) -> int:
        return self.numeric.shape[1]

    def one_hot(self) -> np.ndarray:
        blocks = [self.numeric]
        for j, size in enumerate(self.vocab_sizes):
            oh = np.zeros((len(self), size))
            oh[np.arange(len(self)), self.categorical[:, j]] = 1.0
            blocks.append(oh)
        return np.hstack(blocks)

    @property
    def width(self) -> int:
        return self.n_numeric + sum(self.vocab_sizes)

    def take(self, idx) -> "Features":
        return Features(self.numeric[idx], self.categorical[idx], self.vocab_sizes)

    def append_numeric(self, cols: np.ndarray) -> "Features":
        cols = np.asarray(cols, dtype=float).reshape(len(self), -1)
        return Features(np.hstack([self.numeric, cols]), self.categorical, self.vocab_sizes)

    @classmethod
    def from_matrix(cls, X) -> "Features":
        X = np.asarray(X, dtype=float)
        X = X.reshape(X.shape[0], -1)
        return cls(X, np.zeros((X.shape[0], 0), dtype=np.int64), ())


def features_of(data: Dataset) -> Features:
    """Feature blocks of a dataset whose feature cells are all present."""
    num_cols = [c.name for c in data.schema.of_kind(ColumnKind.CONTINUOUS)]
    cat_cols = data.schema.of_kind(ColumnKind.CATEGORICAL)
    feats = [data.schema.index(n) for n in num_cols] + [data.schema.index(c.name) for c in cat_cols]
    if data.missing[:, feats].any():
        raise SchemaError("feature cells are missing; run preprocessing first")
    numeric = data.values[:, [data.schema.index(n) for n in num_cols]]
    categorical = data.values[:, [data.schema.index(c.name) for c in cat_cols]].astype(np.int64)
    return Features(numeric, categorical, tuple(len(c.categories) for c in cat_cols))


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "l2"
    strength: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("l2", "none"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not self.strength >= 0:
            raise ValueError("regularization strength must be >= 0")

    @property
    def coef(self) -> float:
        return 0.0 if self.kind == "none" else float(self.strength)


@dataclass(frozen=True)
class OptimizerSpec:
    """``kind`` is ``"sgd"``, ``"adam"`` or ``"lbfgs"`` (deterministic full batch).

    ``batch_size=None`` trains full batch with exact per-sample weights;
    otherwise each epoch draws ``m + n`` rows with probability proportional
    to their weight.
    """

    kind: str = "adam"
    step_size: float = 1e-3
    batch_size: int | None = 128
    epochs: int = 50
    momentum: float = 0.0
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 2000

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.step_size > 0:
            raise ValueError("step size must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    task: str = "classification"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")

    def replace(self, **kw) -> "TrainConfig":
        d = {f: getattr(self, f) for f in ("alpha", "regularizer", "optimizer", "task")}
        d.update(kw)
        return TrainConfig(**d)


@dataclass(frozen=True)
class LinearConfig:
    kind: str = "linear"


@dataclass(frozen=True)
class MlpConfig:
    """Three ReLU layers with dropout and batch norm, plus a first-to-last skip connection.

    ``embedding_dims=None`` gives each categorical column ``ceil(sqrt(vocab))`` dimensions.
    """

    widths: tuple[int, int, int] = (128, 128, 128)
    dropout: tuple[float, float, float] = (0.25, 0.25, 0.25)
    batch_norm: tuple[bool, bool, bool] = (True, True, True)
    skip: bool = True
    embedding_dims: tuple[int, ...] | None = None
    bn_momentum: float = 0.9
    kind: str = "mlp"

    def __post_init__(self):
        for name in ("widths", "dropout", "batch_norm"):
            v = getattr(self, name)
            if not isinstance(v, (tuple, list)):
                v = (v,) * 3
            object.__setattr__(self, name, tuple(v))
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} needs one entry per hidden layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("hidden widths must be >= 1")
        if any(not 0.0 <= d < 1.0 for d in self.dropout):
            raise ValueError("dropout must lie in [0, 1)")
        if self.skip and self.widths[0] != self.widths[2]:
            raise ValueError("skip connection needs equal first and last widths")
        if self.embedding_dims is not None:
            object.__setattr__(self, "embedding_dims", tuple(self.embedding_dims))

    def embed_dims(self, vocab_sizes: Sequence[int]) -> tuple[int, ...]:
        if self.embedding_dims is not None:
            if len(self.embedding_dims) != len(vocab_sizes):
                raise ValueError("one embedding dimension per categorical column required")
            return self.embedding_dims
        return tuple(math.ceil(math.sqrt(v)) for v in vocab_sizes)


def config_from_dict(d: Mapping) -> LinearConfig | MlpConfig:
    d = dict(d)
    kind = d.pop("kind", "linear")
    if kind == "linear":
        return LinearConfig()
    if kind == "mlp":
        return MlpConfig(**d)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass(frozen=True)
class RiskValues:
    source_risk: float
    target_risk: float
    objective: float


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector with its layout and non-trainable buffers."""

    kind: str
    theta: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    config: LinearConfig | MlpConfig
    task: str
    n_numeric: int
    vocab_sizes: tuple[int, ...]
    out_dims: tuple[int, ...] = (1,)
    buffers: Mapping[str, np.ndarray] = field(default_factory=dict)
    history: tuple[RiskValues, ...] = ()

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != sum(int(np.prod(s)) for _, s in self.layout):
            raise ValueError("theta size does not match layout")
        if not np.all(np.isfinite(theta)):
            raise ValueError("parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "buffers", {k: np.array(v, dtype=float) for k, v in self.buffers.items()})

    def unflatten(self, theta: np.ndarray | None = None) -> dict[str, np.ndarray]:
        return unflatten(self.theta if theta is None else theta, self.layout)

    def with_theta(self, theta, buffers=None, history=None) -> "ModelParams":
        return ModelParams(
            self.kind, theta, self.layout, self.config, self.task, self.n_numeric, self.vocab_sizes,
            self.out_dims, self.buffers if buffers is None else buffers,
            self.history if history is None else tuple(history),
        )

    def digest(self) -> str:
        h = hashlib.sha256(self.theta.tobytes())
        for k in sorted(self.buffers):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.buffers[k]).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": "shiftadapt.params/1",
            "kind": self.kind,
            "task": self.task,
            "config": asdict(self.config),
            "layout": [[n, list(s)] for n, s in self.layout],
            "theta": self.theta.tolist(),
            "n_numeric": self.n_numeric,
            "vocab_sizes": list(self.vocab_sizes),
            "out_dims": list(self.out_dims),
            "buffers": {k: v.tolist() for k, v in sorted(self.buffers.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelParams":
        return cls(
            d["kind"], np.array(d["theta"]), tuple((n, tuple(s)) for n, s in d["layout"]),
            config_from_dict(d["config"]), d["task"], d["n_numeric"], tuple(d["vocab_sizes"]),
            tuple(d["out_dims"]), {k: np.array(v) for k, v in d["buffers"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def unflatten(theta: np.ndarray, layout) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        out[name] = theta[pos:pos + size].reshape(shape)
        pos += size
    return out


def flatten(parts: Mapping[str, np.ndarray], layout) -> np.ndarray:
    return np.concatenate([np.asarray(parts[name], dtype=float).ravel() for name, _ in layout]) if layout else np.zeros(0)


def erm_weights(is_target: np.ndarray, alpha: float) -> np.ndarray:
    """Per-sample weights (1 - alpha)/m for source rows and alpha/n for target rows."""
    is_target = np.asarray(is_target, dtype=bool)
    m, n = int((~is_target).sum()), int(is_target.sum())
    if alpha > 0 and n == 0:
        raise ValueError("alpha > 0 requires at least one target row")
    if alpha < 1 and m == 0:
        raise ValueError("alpha < 1 requires at least one source row")
    w = np.zeros(is_target.size)
    if m:
        w[~is_target] = (1.0 - alpha) / m
    if n:
        w[is_target] = alpha / n
    return w
