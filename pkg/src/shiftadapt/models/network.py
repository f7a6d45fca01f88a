"""Forward and backward passes for the linear model and the MLP.

Both expose ``forward(params, feats, training, rng)`` returning the output
matrix and a cache, and ``backward(params, cache, d_out)`` returning the flat
gradient of ``sum(d_out * out)`` with respect to ``params.theta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import Features, LinearConfig, MlpConfig, ModelParams, flatten

BN_EPS = 1e-5


# -- initialisation --------------------------------------------------------

def init_linear(feats: Features, task: str) -> ModelParams:
    layout = (("coef", (feats.width,)), ("intercept", ()))
    return ModelParams("linear", np.zeros(feats.width + 1), layout, LinearConfig(), task,
                       feats.n_numeric, feats.vocab_sizes)


def linear_params(coef, intercept: float = 0.0, task: str = "classification", vocab_sizes=()) -> ModelParams:
    """Linear model with explicit weights over ``numeric ++ one_hot(categorical)``."""
    coef = np.asarray(coef, dtype=float).ravel()
    n_numeric = coef.size - sum(vocab_sizes)
    layout = (("coef", (coef.size,)), ("intercept", ()))
    return ModelParams("linear", np.r_[coef, intercept], layout, LinearConfig(), task, n_numeric, tuple(vocab_sizes))


def _mlp_layout(cfg: MlpConfig, n_numeric: int, vocab_sizes, out_dims) -> tuple:
    dims = cfg.embed_dims(vocab_sizes)
    layout = [(f"emb{j}", (v, d)) for j, (v, d) in enumerate(zip(vocab_sizes, dims))]
    fan_in = n_numeric + sum(dims)
    for k, (w, bn) in enumerate(zip(cfg.widths, cfg.batch_norm), start=1):
        layout.append((f"W{k}", (fan_in, w)))
        if bn:
            layout += [(f"gamma{k}", (w,)), (f"beta{k}", (w,))]
        else:
            layout.append((f"b{k}", (w,)))
        fan_in = w
    layout += [("Wout", (fan_in, int(sum(out_dims)))), ("bout", (int(sum(out_dims)),))]
    return tuple(layout)


def init_mlp(cfg: MlpConfig, feats: Features, task: str, rng: np.random.Generator,
             out_dims: tuple[int, ...] = (1,)) -> ModelParams:
    layout = _mlp_layout(cfg, feats.n_numeric, feats.vocab_sizes, out_dims)
    parts, buffers = {}, {}
    for name, shape in layout:
        if name.startswith("emb"):
            parts[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
        elif name.startswith("W"):
            gain = 2.0 if name != "Wout" else 1.0
            parts[name] = rng.normal(0.0, np.sqrt(gain / shape[0]), shape)
        elif name.startswith("gamma"):
            parts[name] = np.ones(shape)
        else:
            parts[name] = np.zeros(shape)
    for k, (w, bn) in enumerate(zip(cfg.widths, cfg.batch_norm), start=1):
        if bn:
            buffers[f"mean{k}"] = np.zeros(w)
            buffers[f"var{k}"] = np.ones(w)
    return ModelParams("mlp", flatten(parts, layout), layout, cfg, task, feats.n_numeric,
                       feats.vocab_sizes, tuple(out_dims), buffers)


def check_features(params: ModelParams, feats: Features) -> None:
    if feats.n_numeric != params.n_numeric or feats.vocab_sizes != params.vocab_sizes:
        raise ValueError(
            f"feature layout mismatch: model expects {params.n_numeric} numeric + vocab {params.vocab_sizes}, "
            f"got {feats.n_numeric} numeric + vocab {feats.vocab_sizes}"
        )


# -- linear ----------------------------------------------------------------

def _linear_forward(params, feats, theta):
    p = params.unflatten(theta)
    X = feats.one_hot()
    return (X @ p["coef"] + p["intercept"])[:, None], X


def _linear_backward(params, X, d_out):
    d = d_out[:, 0]
    return np.r_[X.T @ d, d.sum()]


# -- mlp -------------------------------------------------------------------

@dataclass
class _Layer:
    inp: np.ndarray
    z: np.ndarray
    zhat: np.ndarray | None
    inv_std: np.ndarray | None
    pre_relu: np.ndarray
    mask: np.ndarray | None


@dataclass
class MlpCache:
    x0: np.ndarray
    layers: list
    hidden: list
    batch_stats: dict
    training: bool
    cat: np.ndarray


def _mlp_forward(params: ModelParams, feats: Features, theta, training: bool, rng):
    cfg: MlpConfig = params.config
    p = params.unflatten(theta)
    embs = [p[f"emb{j}"][feats.categorical[:, j]] for j in range(len(feats.vocab_sizes))]
    x0 = np.hstack([feats.numeric] + embs) if embs else feats.numeric
    h = x0
    layers, hidden, batch_stats = [], [], {}
    for k in range(1, 4):
        z = h @ p[f"W{k}"]
        zhat = inv_std = None
        if cfg.batch_norm[k - 1]:
            if training:
                mu, var = z.mean(axis=0), z.var(axis=0)
                batch_stats[k] = (mu, var)
            else:
                mu, var = params.buffers[f"mean{k}"], params.buffers[f"var{k}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            y = p[f"gamma{k}"] * zhat + p[f"beta{k}"]
        else:
            y = z + p[f"b{k}"]
        a = np.maximum(y, 0.0)
        mask = None
        rate = cfg.dropout[k - 1]
        if training and rng is not None and rate > 0:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
        if k == 3 and cfg.skip:
            a = a + hidden[0]
        layers.append(_Layer(h, z, zhat, inv_std, y, mask))
        hidden.append(a)
        h = a
    out = h @ p["Wout"] + p["bout"]
    return out, MlpCache(x0, layers, hidden, batch_stats, training, feats.categorical)


def _mlp_backward(params: ModelParams, theta, cache: MlpCache, d_out):
    cfg: MlpConfig = params.config
    p = params.unflatten(theta)
    g = {}
    h3 = cache.hidden[2]
    g["Wout"] = h3.T @ d_out
    g["bout"] = d_out.sum(axis=0)
    dh = {3: d_out @ p["Wout"].T}
    dh[1] = np.zeros_like(cache.hidden[0])
    if cfg.skip:
        dh[1] = dh[1] + dh[3]
    dh[2] = None
    for k in (3, 2, 1):
        L = cache.layers[k - 1]
        da = dh[k]
        if L.mask is not None:
            da = da * L.mask
        dy = da * (L.pre_relu > 0)
        if cfg.batch_norm[k - 1]:
            g[f"gamma{k}"] = (dy * L.zhat).sum(axis=0)
            g[f"beta{k}"] = dy.sum(axis=0)
            dzhat = dy * p[f"gamma{k}"]
            if cache.training:
                n = dzhat.shape[0]
                dz = L.inv_std / n * (n * dzhat - dzhat.sum(axis=0) - L.zhat * (dzhat * L.zhat).sum(axis=0))
            else:
                dz = dzhat * L.inv_std
        else:
            g[f"b{k}"] = dy.sum(axis=0)
            dz = dy
        g[f"W{k}"] = L.inp.T @ dz
        dinp = dz @ p[f"W{k}"].T
        if k > 1:
            dh[k - 1] = dinp if dh[k - 1] is None else dh[k - 1] + dinp
        else:
            dx0 = dinp
    off = params.n_numeric
    for j, dim in enumerate(cfg.embed_dims(params.vocab_sizes)):
        gE = np.zeros(p[f"emb{j}"].shape)
        np.add.at(gE, cache.cat[:, j], dx0[:, off:off + dim])
        g[f"emb{j}"] = gE
        off += dim
    return flatten(g, params.layout)


# -- dispatch --------------------------------------------------------------

def forward(params: ModelParams, feats: Features, theta=None, training: bool = False, rng=None):
    check_features(params, feats)
    theta = params.theta if theta is None else theta
    if params.kind == "linear":
        out, X = _linear_forward(params, feats, theta)
        return out, X
    return _mlp_forward(params, feats, theta, training, rng)


def backward(params: ModelParams, cache, d_out, theta=None) -> np.ndarray:
    theta = params.theta if theta is None else theta
    if params.kind == "linear":
        return _linear_backward(params, cache, d_out)
    return _mlp_backward(params, theta, cache, d_out)


def penultimate(params: ModelParams, feats: Features) -> np.ndarray:
    """Last hidden layer activations in inference mode."""
    if params.kind != "mlp":
        raise ValueError("penultimate features need an MLP")
    _, cache = forward(params, feats, training=False)
    return cache.hidden[2]


def updated_buffers(params: ModelParams, cache: MlpCache, n_rows: int, momentum: float | None = None) -> dict:
    """Running batch-norm statistics after one training-mode pass."""
    if params.kind != "mlp":
        return {}
    cfg: MlpConfig = params.config
    mom = cfg.bn_momentum if momentum is None else momentum
    out = dict(params.buffers)
    unbias = n_rows / (n_rows - 1) if n_rows > 1 else 1.0
    for k, (mu, var) in cache.batch_stats.items():
        out[f"mean{k}"] = mom * params.buffers[f"mean{k}"] + (1 - mom) * mu
        out[f"var{k}"] = mom * params.buffers[f"var{k}"] + (1 - mom) * var * unbias
    return out
