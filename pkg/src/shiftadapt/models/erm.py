"""Alpha-weighted empirical risk minimization.

The objective is ``(1 - alpha) * R_s + alpha * R_t + Omega(theta)`` where the
risks are mean negative log-likelihoods over source and target rows and
``Omega(theta) = strength * ||theta||^2 / 2``. Classification uses the
sigmoid-Bernoulli likelihood, regression a unit-variance Gaussian (squared
error / 2, constant dropped).
"""
from __future__ import annotations

import logging

import numpy as np
from scipy import optimize
from scipy.special import expit

from ..data import Dataset, GroupedDataset
from . import network
from .base import (
    Features,
    LinearConfig,
    MlpConfig,
    ModelParams,
    RiskValues,
    TrainConfig,
    TrainingDiverged,
    erm_weights,
    features_of,
)

log = logging.getLogger(__name__)


def per_sample_loss(out: np.ndarray, y: np.ndarray, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-row negative log-likelihood and its derivative with respect to the output."""
    z = out[:, 0]
    if task == "classification":
        loss = np.logaddexp(0.0, z) - y * z
        d = expit(z) - y
    else:
        r = z - y
        loss = 0.5 * r * r
        d = r
    return loss, d[:, None]


def _pair_arrays(pair: GroupedDataset) -> tuple[Features, np.ndarray, np.ndarray]:
    pooled, is_target = pair.pooled()
    return features_of(pooled), pooled.labels.astype(float), is_target


def objective_and_grad(params: ModelParams, feats: Features, y, weights, reg: float, theta=None,
                       training: bool = False, rng=None, loss_fn=None):
    """Weighted objective ``sum_i w_i loss_i + reg/2 ||theta||^2`` and its exact gradient.

    ``loss_fn(out, y) -> (loss, d_loss/d_out)`` overrides the task likelihood.
    """
    theta = params.theta if theta is None else theta
    out, cache = network.forward(params, feats, theta, training, rng)
    loss, d = loss_fn(out, y) if loss_fn else per_sample_loss(out, y, params.task)
    obj = float(weights @ loss) + 0.5 * reg * float(theta @ theta)
    grad = network.backward(params, cache, weights[:, None] * d, theta) + reg * theta
    return obj, grad, loss, cache


def risk_values(params: ModelParams, feats: Features, y, is_target, cfg: TrainConfig,
                training: bool = False) -> RiskValues:
    is_target = np.asarray(is_target, dtype=bool)
    out, _ = network.forward(params, feats, training=training)
    loss, _ = per_sample_loss(out, np.asarray(y, dtype=float), params.task)
    if not np.all(np.isfinite(loss)):
        raise FloatingPointError("non-finite loss encountered")
    r_s = float(loss[~is_target].mean()) if (~is_target).any() else 0.0
    r_t = float(loss[is_target].mean()) if is_target.any() else 0.0
    reg = cfg.regularizer.coef
    obj = (1.0 - cfg.alpha) * r_s + cfg.alpha * r_t + 0.5 * reg * float(params.theta @ params.theta)
    return RiskValues(r_s, r_t, obj)


def weighted_erm_loss(params: ModelParams, pair: GroupedDataset, cfg: TrainConfig,
                      training: bool = False) -> RiskValues:
    """Source risk, target risk and the alpha-weighted objective at ``params``.

    The target risk is reported as 0 when there are no target rows (only
    allowed with ``alpha = 0``).
    """
    if cfg.alpha > 0 and pair.n == 0:
        raise ValueError("alpha > 0 requires target rows")
    feats, y, is_target = _pair_arrays(pair)
    return risk_values(params, feats, y, is_target, cfg, training)


def gradient(params: ModelParams, pair: GroupedDataset, cfg: TrainConfig, training: bool = False) -> np.ndarray:
    """Exact gradient of the weighted objective (dropout disabled)."""
    feats, y, is_target = _pair_arrays(pair)
    w = erm_weights(is_target, cfg.alpha)
    _, grad, loss, _ = objective_and_grad(params, feats, y, w, cfg.regularizer.coef, training=training)
    if not np.all(np.isfinite(loss)):
        raise FloatingPointError("non-finite loss encountered")
    return grad


def init_params(model_config, feats: Features, task: str, rng: np.random.Generator,
                out_dims: tuple[int, ...] = (1,)) -> ModelParams:
    if isinstance(model_config, MlpConfig):
        return network.init_mlp(model_config, feats, task, rng, out_dims)
    if isinstance(model_config, LinearConfig) or model_config in (None, "linear"):
        return network.init_linear(feats, task)
    raise ValueError(f"unsupported model config {model_config!r}")


def _batches(n_rows: int, batch_size: int) -> list[slice]:
    bounds = list(range(0, n_rows, batch_size)) + [n_rows]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        # batch norm cannot normalise a single row; fold it into the previous batch
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def fit_weighted(feats: Features, y, weights, model_config, cfg: TrainConfig, is_target=None,
                 init: ModelParams | None = None, loss_fn=None) -> ModelParams:
    """Minimise ``sum_i w_i loss_i + Omega`` with weights normalised to sum to one."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        raise ValueError("sample weights must have positive mass")
    w = w / w.sum()
    is_target = np.zeros(len(feats), bool) if is_target is None else np.asarray(is_target, bool)
    opt = cfg.optimizer
    rng = np.random.default_rng(opt.seed)
    params = init if init is not None else init_params(model_config, feats, cfg.task, rng)
    reg = cfg.regularizer.coef
    is_mlp = params.kind == "mlp"

    def record(p: ModelParams) -> RiskValues:
        out, _ = network.forward(p, feats)
        loss, _ = loss_fn(out, y) if loss_fn else per_sample_loss(out, y, p.task)
        r_s = float(loss[~is_target].mean()) if (~is_target).any() else 0.0
        r_t = float(loss[is_target].mean()) if is_target.any() else 0.0
        return RiskValues(r_s, r_t, float(w @ loss) + 0.5 * reg * float(p.theta @ p.theta))

    history: list[RiskValues] = []
    if opt.kind == "lbfgs":
        def fun(theta):
            obj, grad, _, _ = objective_and_grad(params, feats, y, w, reg, theta, training=is_mlp, loss_fn=loss_fn)
            if not np.isfinite(obj):
                return np.inf, np.zeros_like(theta)
            return obj, grad

        def callback(xk):
            history.append(record(_finalise(params, xk, feats, is_mlp)))

        res = optimize.minimize(fun, params.theta.copy(), jac=True, method="L-BFGS-B", callback=callback,
                                options={"maxiter": opt.max_iter, "gtol": opt.tol, "ftol": 1e-15, "maxcor": 20})
        if not np.all(np.isfinite(res.x)):
            raise TrainingDiverged("L-BFGS produced non-finite parameters", params)
        final = _finalise(params, res.x, feats, is_mlp)
        return final.with_theta(final.theta, history=history or [record(final)])

    theta = params.theta.copy()
    buffers = dict(params.buffers)
    vel = np.zeros_like(theta)
    m1, m2, t = np.zeros_like(theta), np.zeros_like(theta), 0
    last_ok = params
    n_rows = len(feats)
    for epoch in range(opt.epochs):
        if opt.batch_size is None:
            plan = [(np.arange(n_rows), w)]
        else:
            idx = rng.choice(n_rows, size=n_rows, replace=True, p=w)
            plan = [(idx[s], np.full(s.stop - s.start, 1.0 / (s.stop - s.start)))
                    for s in _batches(n_rows, opt.batch_size)]
        for rows, bw in plan:
            cur = params.with_theta(theta, buffers)
            sub = feats.take(rows)
            _, grad, _, cache = objective_and_grad(cur, sub, y[rows], bw, reg, theta,
                                                   training=is_mlp, rng=rng if is_mlp else None,
                                                   loss_fn=loss_fn)
            if is_mlp:
                buffers = network.updated_buffers(cur, cache, len(rows))
            if opt.kind == "adam":
                t += 1
                m1 = 0.9 * m1 + 0.1 * grad
                m2 = 0.999 * m2 + 0.001 * grad * grad
                step = opt.step_size * (m1 / (1 - 0.9 ** t)) / (np.sqrt(m2 / (1 - 0.999 ** t)) + 1e-8)
            else:
                vel = opt.momentum * vel + grad
                step = opt.step_size * vel
            theta = theta - step
            if not (np.all(np.isfinite(theta)) and all(np.all(np.isfinite(b)) for b in buffers.values())):
                raise TrainingDiverged(f"parameters diverged at epoch {epoch}", last_ok, epoch)
        current = params.with_theta(theta, buffers)
        with np.errstate(over="ignore", invalid="ignore"):
            rv = record(current)
        if not np.isfinite(rv.objective):
            raise TrainingDiverged(f"objective diverged at epoch {epoch}", last_ok, epoch)
        history.append(rv)
        last_ok = current
    return last_ok.with_theta(last_ok.theta, history=history)


def _finalise(params: ModelParams, theta, feats: Features, is_mlp: bool) -> ModelParams:
    """Parameters at ``theta``; MLP running statistics set to the full-batch statistics."""
    p = params.with_theta(theta)
    if not is_mlp:
        return p
    _, cache = network.forward(p, feats, training=True)
    buffers = dict(p.buffers)
    for k, (mu, var) in cache.batch_stats.items():
        buffers[f"mean{k}"], buffers[f"var{k}"] = mu, var
    return p.with_theta(p.theta, buffers)


def train(pair: GroupedDataset, model_config, cfg: TrainConfig) -> ModelParams:
    """Fit parameters minimising the alpha-weighted objective on a preprocessed pair."""
    if cfg.alpha > 0 and pair.n == 0:
        raise ValueError("alpha > 0 requires target rows")
    feats, y, is_target = _pair_arrays(pair)
    return fit_weighted(feats, y, erm_weights(is_target, cfg.alpha), model_config, cfg, is_target)


def predict(params: ModelParams, data: Dataset | Features) -> np.ndarray:
    """Probabilities (classification) or real predictions (regression), inference mode."""
    feats = data if isinstance(data, Features) else features_of(data)
    out, _ = network.forward(params, feats, training=False)
    return expit(out[:, 0]) if params.task == "classification" else out[:, 0].copy()
