"""Generalization and adaptation bounds, and the bound-minimizing source/target weight.

All logarithms are natural. The unspecified constant in front of the
complexity term is ``constant_c`` (default 1), so reported bounds hold only up
to that constant. ``divergence`` is whatever distribution distance the caller
plugs in; the MMD statistic from :mod:`shiftadapt.mmd` is an engineering proxy
for it, not the same quantity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import GroupedDataset
from .models import erm
from .models.base import TrainConfig, erm_weights, features_of

GRID_STEP = 1e-4


@dataclass(frozen=True)
class BoundInputs:
    vc_dimension: float
    delta: float
    m: int
    n: int
    divergence: float = 0.0
    lam: float = 0.0
    constant_c: float = 1.0

    def __post_init__(self):
        vals = (self.vc_dimension, self.delta, self.divergence, self.lam, self.constant_c)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("bound inputs must be finite")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.vc_dimension < 0 or self.divergence < 0 or self.lam < 0 or self.constant_c <= 0:
            raise ValueError("V, d, lambda must be >= 0 and c > 0")
        if self.m < 0 or self.n < 0:
            raise ValueError("sample counts must be >= 0")

    @property
    def complexity(self) -> float:
        """``V - ln(delta)``."""
        return self.vc_dimension - math.log(self.delta)


def vc_bound(empirical_risk: float, b: BoundInputs) -> float:
    """``R_hat + c * sqrt((V - ln delta) / n)``."""
    if b.n < 1:
        raise ValueError("vc_bound needs n >= 1")
    return empirical_risk + b.constant_c * math.sqrt(b.complexity / b.n)


def domain_adaptation_bound(source_risk: float, b: BoundInputs) -> float:
    """Target risk bound from source risk, complexity, divergence/2 and lambda."""
    return vc_bound(source_risk, b) + b.divergence / 2.0 + b.lam


def weighted_erm_bound_rhs(alpha, target_opt_risk: float, b: BoundInputs):
    """``R_t* + 4 sqrt((a^2/n + (1-a)^2/m)(V - ln delta)) + 2 (1-a) d``; vectorised over ``alpha``."""
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    if b.n == 0 and np.any(a > 0):
        raise ValueError("alpha > 0 requires n >= 1")
    if b.m == 0 and np.any(a < 1):
        raise ValueError("alpha < 1 requires m >= 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        t_term = np.where(a > 0, a * a / max(b.n, 1), 0.0)
        s_term = np.where(a < 1, (1 - a) ** 2 / max(b.m, 1), 0.0)
    out = target_opt_risk + 4.0 * np.sqrt((t_term + s_term) * b.complexity) + 2.0 * (1 - a) * b.divergence
    return float(out) if out.ndim == 0 else out


def alpha_threshold(b: BoundInputs) -> float:
    """Target count above which alpha = 1 minimises the bound: ``4 (V - ln delta) / d^2``."""
    d2 = b.divergence ** 2
    # d^2 can underflow to zero for tiny positive d
    return math.inf if d2 == 0 else 4.0 * b.complexity / d2


def optimal_alpha_grid(b: BoundInputs, step: float = GRID_STEP) -> float:
    """Brute-force argmin of the bound over a uniform alpha grid (the reference oracle)."""
    lo = 0.0 if b.m >= 1 else 1.0
    hi = 1.0 if b.n >= 1 else 0.0
    grid = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1) if hi > lo else np.array([lo])
    return float(grid[int(np.argmin(weighted_erm_bound_rhs(grid, 0.0, b)))])


def optimal_alpha(b: BoundInputs) -> float:
    """Alpha in [0, 1] minimising the weighted-ERM bound.

    Shortcuts: no target rows gives 0, no source rows gives 1, and at or above
    the target-count threshold the answer is 1. With zero divergence the
    minimiser is ``n / (m + n)``. Otherwise the dense-grid argmin is refined by
    bounded scalar minimisation within one grid step (the bound is convex).
    """
    if b.n == 0:
        return 0.0
    if b.m == 0:
        return 1.0
    if b.divergence > 0 and b.n >= alpha_threshold(b):
        return 1.0
    if b.divergence == 0:
        return b.n / (b.m + b.n)
    a0 = optimal_alpha_grid(b)
    lo, hi = max(0.0, a0 - GRID_STEP), min(1.0, a0 + GRID_STEP)
    res = optimize.minimize_scalar(lambda a: weighted_erm_bound_rhs(a, 0.0, b), bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-10})
    return float(res.x) if res.fun <= weighted_erm_bound_rhs(a0, 0.0, b) else a0


def bound_table(b: BoundInputs, target_opt_risk: float = 0.0, alphas=None) -> list[dict]:
    alphas = np.round(np.linspace(0, 1, 21), 10) if alphas is None else np.asarray(alphas, float)
    if b.n == 0:
        alphas = alphas[alphas == 0]
    if b.m == 0:
        alphas = alphas[alphas == 1]
    rhs = weighted_erm_bound_rhs(alphas, target_opt_risk, b)
    return [{"alpha": float(a), "rhs": float(r)} for a, r in zip(np.atleast_1d(alphas), np.atleast_1d(rhs))]


def estimate_lambda(pair: GroupedDataset, model_config, cfg: TrainConfig | None = None) -> float:
    """Upper estimate of ``min_theta R_s + R_t``.

    Trains one model on the union minimising the unweighted sum of the two
    mean risks (equal weights) and returns the achieved ``R_s + R_t``.
    """
    if pair.n == 0:
        raise ValueError("estimate_lambda needs target rows")
    cfg = (cfg or TrainConfig()).replace(alpha=0.5)
    pooled, is_target = pair.pooled()
    feats, y = features_of(pooled), pooled.labels.astype(float)
    params = erm.fit_weighted(feats, y, erm_weights(is_target, 0.5), model_config, cfg, is_target)
    rv = erm.risk_values(params, feats, y, is_target, cfg)
    return rv.source_risk + rv.target_risk


def parameter_count(params) -> int:
    """Parameter count, used as a heuristic stand-in for the VC dimension."""
    return int(params.theta.size)
