"""Learned-feature maximum mean discrepancy between population groups.

A single multi-head MLP is trained to predict every group attribute from the
covariates; its last shared hidden layer is the feature map on which kernel
two-sample statistics are computed. Sharing one trunk across attributes keeps
statistics for different attributes on a common scale.

Reported statistics are the unbiased squared MMD for equal-size samples,
not its square root.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage

from .data import UNKNOWN, ColumnKind, Dataset, SchemaError
from .models import erm, network
from .models.base import Features, MlpConfig, ModelParams, OptimizerSpec, RegularizerSpec, TrainConfig, features_of

log = logging.getLogger(__name__)

STATISTIC_NAME = "MMD^2_u"


@dataclass(frozen=True)
class Kernel:
    kind: str = "rbf"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and not self.bandwidth > 0:
            raise ValueError("rbf bandwidth must be > 0")

    def gram(self, A, B) -> np.ndarray:
        A, B = _as_points(A), _as_points(B)
        if self.kind == "linear":
            return A @ B.T
        return np.exp(-_sq_dists(A, B) / (2.0 * self.bandwidth ** 2))


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _sq_dists(A, B) -> np.ndarray:
    # Direct differences keep d(a, b) bitwise equal to d(b, a).
    if A.shape[1] <= 8:
        return ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _offdiag_sum(K: np.ndarray) -> float:
    return float(K.sum() - np.trace(K))


def mmd_unbiased(xs, ys, kernel: Kernel) -> float:
    """Unbiased squared MMD for two equal-size samples.

    ``1/(n^2 - n) * sum_{i != j} k(x_i, x_j) + k(y_i, y_j) - k(x_i, y_j) - k(x_j, y_i)``.
    May be negative.
    """
    xs, ys = _as_points(xs), _as_points(ys)
    n = xs.shape[0]
    if ys.shape[0] != n:
        raise ValueError(f"samples must have equal sizes, got {n} and {ys.shape[0]}")
    if n < 2:
        raise ValueError("need at least two points per sample")
    within = _offdiag_sum(kernel.gram(xs, xs)) + _offdiag_sum(kernel.gram(ys, ys))
    cross = _offdiag_sum(kernel.gram(xs, ys)) + _offdiag_sum(kernel.gram(ys, xs))
    return (within - cross) / (n * n - n)


def median_bandwidth(points) -> float:
    """Median pairwise Euclidean distance; the smallest positive distance if the median is 0."""
    P = _as_points(points)
    if P.shape[0] < 2:
        raise ValueError("need at least two points")
    iu = np.triu_indices(P.shape[0], k=1)
    d = np.sqrt(_sq_dists(P, P)[iu])
    med = float(np.median(d))
    if med > 0:
        return med
    pos = d[d > 0]
    if pos.size == 0:
        raise ValueError("all points identical; bandwidth undefined")
    return float(pos.min())


@dataclass(frozen=True)
class MmdResult:
    statistic: float
    p_value: float
    n_per_side: int
    permutations: int
    null_statistics: np.ndarray = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "statistic_kind": STATISTIC_NAME, "p_value": self.p_value,
                "n_per_side": self.n_per_side, "permutations": self.permutations}


def _permuted_statistics(K: np.ndarray, perms: np.ndarray, n: int) -> np.ndarray:
    """Statistic for each row of ``perms`` (first ``n`` pooled indices form xs, the rest ys)."""
    B = perms.shape[0]
    diag = np.diag(K)
    a = np.zeros((B, 2 * n))
    a[np.arange(B)[:, None], perms[:, :n]] = 1.0
    b = 1.0 - a
    Ka = a @ K
    Kb = K.sum(axis=0)[None, :] - Ka
    sxx = (Ka * a).sum(1) - a @ diag
    syy = (Kb * b).sum(1) - b @ diag
    sxy = (Ka * b).sum(1)
    matched = K[perms[:, :n], perms[:, n:]].sum(1)
    return (sxx + syy - 2.0 * (sxy - matched)) / (n * n - n)


def permutation_test(xs, ys, kernel: Kernel, permutations: int = 10_000, seed: int = 0,
                     chunk: int = 1000) -> MmdResult:
    """Permutation p-value ``(1 + #{null >= observed}) / (1 + B)`` for the unbiased statistic."""
    if permutations < 99:
        raise ValueError("at least 99 permutations are required")
    xs, ys = _as_points(xs), _as_points(ys)
    obs = mmd_unbiased(xs, ys, kernel)
    n = xs.shape[0]
    pooled = np.vstack([xs, ys])
    K = kernel.gram(pooled, pooled)
    rng = np.random.default_rng(seed)
    null = np.empty(permutations)
    for start in range(0, permutations, chunk):
        cnt = min(chunk, permutations - start)
        perms = np.argsort(rng.random((cnt, 2 * n)), axis=1)
        null[start:start + cnt] = _permuted_statistics(K, perms, n)
    p = (1 + int((null >= obs).sum())) / (1 + permutations)
    return MmdResult(obs, p, n, permutations, null)


# -- learned feature map ----------------------------------------------------

@dataclass(frozen=True)
class FeatureMapConfig:
    widths: tuple[int, int, int] = (64, 64, 64)
    dropout: float = 0.1
    batch_norm: bool = True
    epochs: int = 40
    step_size: float = 1e-3
    batch_size: int = 128
    l2: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class FeatureMap:
    params: ModelParams
    attributes: tuple[str, ...]
    categories: Mapping[str, tuple[str, ...]]
    excluded: Mapping[str, str]

    @property
    def dim(self) -> int:
        return self.params.config.widths[2]

    def transform(self, data: Dataset | Features) -> np.ndarray:
        feats = data if isinstance(data, Features) else features_of(data)
        return network.penultimate(self.params, feats)

    def predict_groups(self, data: Dataset | Features) -> dict[str, list[str]]:
        feats = data if isinstance(data, Features) else features_of(data)
        out, _ = network.forward(self.params, feats)
        preds, off = {}, 0
        for attr in self.attributes:
            cats = self.categories[attr]
            block = out[:, off:off + len(cats)]
            preds[attr] = [cats[i] for i in block.argmax(axis=1)]
            off += len(cats)
        return preds


def _multihead_loss(head_sizes: Sequence[int], scale: Sequence[float]):
    def loss_fn(out, Y):
        Y = np.asarray(Y).astype(int).reshape(out.shape[0], -1)
        loss = np.zeros(out.shape[0])
        d = np.zeros_like(out)
        off = 0
        for h, size in enumerate(head_sizes):
            z = out[:, off:off + size]
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            y = Y[:, h]
            known = y >= 0
            rows = np.flatnonzero(known)
            loss[rows] -= scale[h] * logp[rows, y[rows]]
            g = np.exp(logp)
            g[rows, y[rows]] -= 1.0
            d[:, off:off + size] = g * (known * scale[h])[:, None]
            off += size
        return loss, d
    return loss_fn


def _group_targets(data: Dataset, attribute: str) -> tuple[tuple[str, ...], np.ndarray]:
    col = data.schema.column(attribute)
    names = data.categories_of(attribute)
    present = sorted({g for g in names if g not in (None, UNKNOWN)}, key=col.categories.index)
    index = {g: i for i, g in enumerate(present)}
    return tuple(present), np.array([index.get(g, -1) for g in names])


def learn_feature_map(data: Dataset, attributes: Sequence[str], config: FeatureMapConfig | None = None) -> FeatureMap:
    """Train one shared trunk with a softmax head per attribute; minimises the summed head cross-entropies.

    Rows whose group is missing/unknown do not contribute to that head.
    Attributes with fewer than two groups of two or more rows are excluded.
    """
    config = config or FeatureMapConfig()
    feats = features_of(data)
    kept, cats, cols, excluded = [], {}, [], {}
    for attr in attributes:
        if data.schema.column(attr).kind is not ColumnKind.GROUP:
            raise SchemaError(f"{attr!r} is not a group-attribute column")
        groups, y = _group_targets(data, attr)
        counts = np.bincount(y[y >= 0], minlength=len(groups))
        usable = [g for g, c in zip(groups, counts) if c >= 2]
        if len(usable) < 2:
            excluded[attr] = f"only {len(usable)} group(s) with >= 2 rows"
            log.warning("excluding attribute %r from the feature map: %s", attr, excluded[attr])
            continue
        kept.append(attr)
        cats[attr] = groups
        cols.append(y)
    if not kept:
        raise ValueError("no attribute has at least two groups")
    Y = np.column_stack(cols).astype(float)
    head_sizes = [len(cats[a]) for a in kept]
    scale = [len(data) / max(1, int((Y[:, h] >= 0).sum())) for h in range(len(kept))]
    mlp = MlpConfig(widths=config.widths, dropout=(config.dropout,) * 3, batch_norm=(config.batch_norm,) * 3)
    cfg = TrainConfig(0.0, RegularizerSpec("l2", config.l2),
                      OptimizerSpec("adam", config.step_size, config.batch_size, config.epochs, seed=config.seed),
                      "classification")
    init = network.init_mlp(mlp, feats, "classification", np.random.default_rng(config.seed), tuple(head_sizes))
    params = erm.fit_weighted(feats, Y, np.ones(len(data)), mlp, cfg, init=init,
                              loss_fn=_multihead_loss(head_sizes, scale))
    return FeatureMap(params, tuple(kept), cats, excluded)


# -- group distances ----------------------------------------------------------

@dataclass(frozen=True)
class DistanceMatrix:
    groups: tuple[str, ...]
    matrix: np.ndarray
    excluded: Mapping[str, str] = field(default_factory=dict)
    metadata: Mapping[str, object] = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group"] + list(self.groups))
            for g, row in zip(self.groups, self.matrix):
                w.writerow([g] + [repr(float(v)) for v in row])

    def value(self, a: str, b: str) -> float:
        return float(self.matrix[self.groups.index(a), self.groups.index(b)])


def pairwise_mmd(data: Dataset, attribute: str, fmap: FeatureMap | None = None, kernel: Kernel | None = None,
                 seed: int = 0, repeats: int = 10, max_per_group: int | None = None) -> DistanceMatrix:
    """Statistic for every unordered group pair of ``attribute`` on learned features.

    Unequal groups are equalised by subsampling the larger one ``repeats``
    times and averaging. Without ``fmap`` the preprocessed features are used
    directly. The default kernel is an RBF whose bandwidth is the median
    heuristic over all included rows, shared by every pair.
    """
    rng = np.random.default_rng(seed)
    phi = fmap.transform(data) if fmap is not None else features_of(data).one_hot()
    names = data.categories_of(attribute)
    col = data.schema.column(attribute)
    groups, excluded = [], {}
    for g in col.categories:
        idx = np.array([i for i, v in enumerate(names) if (v or UNKNOWN) == g])
        if idx.size == 0:
            continue
        if idx.size < 2:
            excluded[g] = f"{idx.size} row(s)"
            continue
        if max_per_group is not None and idx.size > max_per_group:
            idx = np.sort(rng.choice(idx, max_per_group, replace=False))
        groups.append((g, idx))
    if len(groups) < 2:
        raise ValueError(f"attribute {attribute!r} has fewer than two usable groups")
    if kernel is None:
        all_idx = np.concatenate([i for _, i in groups])
        sample = all_idx if all_idx.size <= 1000 else rng.choice(all_idx, 1000, replace=False)
        kernel = Kernel("rbf", median_bandwidth(phi[np.sort(sample)]))
    k = len(groups)
    M = np.zeros((k, k))
    for (a, (ga, ia)), (b, (gb, ib)) in combinations(enumerate(groups), 2):
        size = min(ia.size, ib.size)
        if ia.size == ib.size:
            stat = mmd_unbiased(phi[ia], phi[ib], kernel)
        else:
            vals = []
            for _ in range(repeats):
                sa = ia if ia.size == size else np.sort(rng.choice(ia, size, replace=False))
                sb = ib if ib.size == size else np.sort(rng.choice(ib, size, replace=False))
                vals.append(mmd_unbiased(phi[sa], phi[sb], kernel))
            stat = float(np.mean(vals))
        M[a, b] = M[b, a] = stat
    meta = {"statistic": STATISTIC_NAME, "kernel": kernel.kind, "bandwidth": kernel.bandwidth,
            "repeats": repeats, "attribute": attribute, "seed": seed,
            "features": "learned" if fmap is not None else "preprocessed"}
    return DistanceMatrix(tuple(g for g, _ in groups), M, excluded, meta)


@dataclass(frozen=True)
class Dendrogram:
    tree: Mapping
    linkage_matrix: np.ndarray
    leaves: tuple[str, ...]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def merges(self) -> list[tuple[frozenset, frozenset, float]]:
        out = []

        def walk(node):
            if "leaf" in node:
                return frozenset([node["leaf"]])
            left, right = walk(node["left"]), walk(node["right"])
            out.append((left, right, node["height"]))
            return left | right

        walk(self.tree)
        return sorted(out, key=lambda m: m[2])

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps({"tree": self.tree, "metadata": dict(self.metadata)}, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def build_dendrogram(d: DistanceMatrix) -> Dendrogram:
    """Average-linkage agglomerative clustering of the groups; heights are linkage distances."""
    k = len(d.groups)
    if k < 2:
        raise ValueError("need at least two groups")
    iu = np.triu_indices(k, 1)
    # Slightly negative unbiased statistics are clipped so the condensed matrix is a valid dissimilarity.
    Z = linkage(np.maximum(d.matrix[iu], 0.0), method="average")
    nodes: dict[int, dict] = {i: {"leaf": g} for i, g in enumerate(d.groups)}
    for step, (a, b, h, _) in enumerate(Z):
        nodes[k + step] = {"left": nodes[int(a)], "right": nodes[int(b)], "height": float(h)}
    meta = {"linkage": "average", "height": dict(d.metadata).get("statistic", STATISTIC_NAME)}
    return Dendrogram(nodes[2 * k - 2], Z, d.groups, meta)


def append_jsonl(path: str | Path, records: Sequence[Mapping]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
