import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftadapt.data import GroupedDataset
from shiftadapt.models import (Features, LearnerSpec, LinearConfig, MlpConfig, OptimizerSpec, RegularizerSpec,
                               TrainConfig, TrainingDiverged, erm_weights, features_of, fit_weighted, forest_predict,
                               forest_train, gradient, knn_fit, knn_predict, linear_params, predict, train,
                               weighted_erm_loss)
from shiftadapt.models import erm, network
from shiftadapt.models.base import ModelParams
from conftest import max_rel_fd_error, numeric_dataset, numeric_pair

LBFGS = OptimizerSpec("lbfgs", tol=1e-12, max_iter=5000)


def logistic_pair(m=30, n=12, seed=0, dims=2, shift=1.0):
    rng = np.random.default_rng(seed)
    Xs = rng.normal(size=(m, dims)) + shift
    Xt = rng.normal(size=(n, dims))
    ys = (rng.random(m) < 1 / (1 + np.exp(-Xs.sum(1) + shift))).astype(float)
    yt = (rng.random(n) < 1 / (1 + np.exp(-Xt[:, 0]))).astype(float)
    return numeric_pair(Xs, ys, Xt, yt)


def cfg(alpha, reg=0.1, opt=LBFGS, task="classification"):
    return TrainConfig(alpha, RegularizerSpec("l2", reg), opt, task)


# -- objective -------------------------------------------------------------

def test_alpha_zero_ignores_target_labels():
    p = logistic_pair()
    flipped = GroupedDataset(p.source, numeric_dataset(features_of(p.target).numeric, 1 - p.target.labels, "t"))
    params = linear_params([0.3, -0.2], 0.1)
    assert weighted_erm_loss(params, p, cfg(0.0)).objective == weighted_erm_loss(params, flipped, cfg(0.0)).objective


def test_alpha_one_ignores_source_labels():
    p = logistic_pair()
    flipped = GroupedDataset(numeric_dataset(features_of(p.source).numeric, 1 - p.source.labels, "s"), p.target)
    params = linear_params([0.3, -0.2], 0.1)
    assert weighted_erm_loss(params, p, cfg(1.0)).objective == weighted_erm_loss(params, flipped, cfg(1.0)).objective


def test_objective_is_weighted_sum():
    p = logistic_pair()
    params = linear_params([0.5, 1.0], -0.3)
    rv = weighted_erm_loss(params, p, cfg(0.3, reg=0.2))
    theta = params.theta
    assert rv.objective == pytest.approx(0.7 * rv.source_risk + 0.3 * rv.target_risk + 0.1 * theta @ theta, abs=1e-14)


def test_pooled_alpha_objective_is_scaled_pooled_mean():
    # 6-row logistic problem checked against a direct pooled-mean oracle.
    Xs, ys = np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1])
    Xt, yt = np.array([[0.5], [2.5]]), np.array([1, 0])
    p = numeric_pair(Xs, ys, Xt, yt)
    alpha = 2 / 6
    for w, b in [(0.4, -0.1), (1.3, 0.7), (-2.0, 1.0)]:
        params = linear_params([w], b)
        rv = weighted_erm_loss(params, p, cfg(alpha, reg=0.0))
        X, y = np.r_[Xs[:, 0], Xt[:, 0]], np.r_[ys, yt]
        z = w * X + b
        pooled = np.mean(np.log1p(np.exp(z)) - y * z)
        assert rv.objective == pytest.approx(pooled, rel=1e-13)


def test_alpha_needs_target_rows():
    p = GroupedDataset(logistic_pair().source)
    with pytest.raises(ValueError):
        weighted_erm_loss(linear_params([0.0, 0.0]), p, cfg(0.5))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_rejected():
    p = numeric_pair([[1e200]], [1.0], [[1e200]], [0.0], task="regression")
    with pytest.raises(FloatingPointError):
        weighted_erm_loss(linear_params([1e200], 0.0, task="regression"), p, cfg(0.5, task="regression"))


def test_erm_weights_formula():
    w = erm_weights(np.array([False, False, False, True]), 0.25)
    assert list(w) == [0.25, 0.25, 0.25, 0.25]
    assert erm_weights(np.array([False, True, True]), 0.5)[1] == 0.25


# -- gradient --------------------------------------------------------------

def _fd_fn(params, pair, config):
    def f(theta):
        p = params.with_theta(theta)
        return weighted_erm_loss(p, pair, config).objective, gradient(p, pair, config)
    return f


@pytest.mark.parametrize("alpha", [0.3, 1.0])
def test_linear_gradient_matches_finite_differences(alpha):
    p = logistic_pair(dims=3)
    rng = np.random.default_rng(1)
    params = linear_params(rng.normal(size=3), 0.2)
    assert max_rel_fd_error(_fd_fn(params, p, cfg(alpha)), params.theta.copy(), range(4)) <= 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_mlp_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cats = (["a", "b", "c"], list(rng.choice(["a", "b", "c"], 25)))
    catt = (["a", "b", "c"], list(rng.choice(["a", "b", "c"], 15)))
    p = numeric_pair(rng.normal(size=(25, 3)), rng.integers(0, 2, 25), rng.normal(size=(15, 3)),
                     rng.integers(0, 2, 15), cats_s={"c": cats}, cats_t={"c": catt})
    mc = MlpConfig(widths=(6, 5, 6), dropout=0.3, batch_norm=(True, False, True))
    params = erm.init_params(mc, features_of(p.source), "classification", rng)
    params = params.with_theta(params.theta, {k: rng.random(v.shape) + 0.5 for k, v in params.buffers.items()})
    coords = rng.choice(params.theta.size, 20, replace=False)
    assert max_rel_fd_error(_fd_fn(params, p, cfg(0.3)), params.theta.copy(), coords) <= 1e-4


def test_gradient_of_regulariser_alone():
    feats = Features.from_matrix(np.ones((3, 2)))
    params = linear_params([0.5, -1.5], 2.0)
    _, g, _, _ = erm.objective_and_grad(params, feats, np.zeros(3), np.zeros(3), reg=0.7)
    assert np.allclose(g, 0.7 * params.theta, atol=0, rtol=1e-15)


def test_gradient_vanishes_at_convex_optimum():
    p = logistic_pair(m=60, n=20)
    c = cfg(0.4, reg=0.05)
    params = train(p, LinearConfig(), c)
    assert np.linalg.norm(gradient(params, p, c)) <= 1e-6


# -- training --------------------------------------------------------------

def test_alpha_one_matches_target_only_erm():
    p = logistic_pair(m=40, n=25, seed=3)
    a = train(p, LinearConfig(), cfg(1.0))
    tonly = GroupedDataset(numeric_dataset(features_of(p.target).numeric, p.target.labels, "q"))
    b = train(tonly, LinearConfig(), cfg(0.0))
    assert np.max(np.abs(a.theta - b.theta)) <= 1e-4
    assert abs(weighted_erm_loss(a, p, cfg(1.0)).objective - weighted_erm_loss(b, tonly, cfg(0.0)).objective) <= 1e-6


def test_pooled_alpha_matches_pooled_erm():
    p = logistic_pair(m=40, n=25, seed=4)
    alpha = p.n / (p.m + p.n)
    a = train(p, LinearConfig(), cfg(alpha))
    pooled, _ = p.pooled()
    b = train(GroupedDataset(pooled), LinearConfig(), cfg(0.0))
    assert np.max(np.abs(a.theta - b.theta)) <= 1e-4


def test_separable_source_stays_finite():
    X = np.r_[np.linspace(-3, -1, 10), np.linspace(1, 3, 10)]
    p = GroupedDataset(numeric_dataset(X, (X > 0).astype(float), "s"))
    params = train(p, LinearConfig(), cfg(0.0, reg=0.1))
    assert np.all(np.isfinite(params.theta)) and np.abs(params.theta).max() < 100


def test_full_batch_convex_history_non_increasing():
    p = logistic_pair(m=50, n=20)
    c = cfg(0.3, opt=OptimizerSpec("sgd", step_size=0.5, batch_size=None, epochs=60))
    hist = [h.objective for h in train(p, LinearConfig(), c).history]
    assert len(hist) == 60
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))


def test_training_is_deterministic():
    p = logistic_pair(m=60, n=20)
    c = cfg(0.5, opt=OptimizerSpec("adam", step_size=1e-2, batch_size=16, epochs=5, seed=9))
    mc = MlpConfig(widths=(8, 8, 8), dropout=0.2)
    a, b = train(p, mc, c), train(p, mc, c)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert [h.objective for h in a.history] == [h.objective for h in b.history]


def test_divergence_reports_last_finite_checkpoint():
    X = np.linspace(0, 50, 20)
    p = GroupedDataset(numeric_dataset(X, 3 * X, "s", task="regression"))
    c = cfg(0.0, reg=0.0, task="regression", opt=OptimizerSpec("sgd", step_size=10.0, batch_size=None, epochs=200))
    with pytest.raises(TrainingDiverged) as info:
        train(p, LinearConfig(), c)
    assert np.all(np.isfinite(info.value.last_params.theta))


@pytest.mark.parametrize("seed", range(3))
def test_monotone_weighting(seed):
    # Exact for the two-term trade-off, so the regulariser is switched off.
    p = logistic_pair(m=40, n=30, seed=seed, shift=1.5)
    rs, rt = [], []
    for a in np.linspace(0, 1, 6):
        params = train(p, LinearConfig(), cfg(a, reg=0.0))
        rv = weighted_erm_loss(params, p, cfg(a, reg=0.0))
        rs.append(rv.source_risk)
        rt.append(rv.target_risk)
    assert all(b <= a + 1e-7 for a, b in zip(rt, rt[1:]))
    assert all(b >= a - 1e-7 for a, b in zip(rs, rs[1:]))


def test_best_grid_alpha_beats_both_extremes_on_shifted_1d():
    grid = np.linspace(0, 1, 11)
    losses = np.zeros((20, grid.size))
    for s in range(20):
        rng = np.random.default_rng(100 + s)
        xs = rng.normal(1.0, 1.0, 1000)
        xt = rng.normal(0.0, 1.0, 10 + 2000)
        ys = (rng.random(1000) < 1 / (1 + np.exp(-2 * xs))).astype(float)
        yt = (rng.random(xt.size) < 1 / (1 + np.exp(-2 * xt + 1.0))).astype(float)
        while len(set(yt[:10])) < 2:
            yt[:10] = 1 - yt[:10] if yt[0] == yt[1] else yt[:10]
        p = numeric_pair(xs, ys, xt[:10], yt[:10])
        test = features_of(numeric_dataset(xt[10:], yt[10:], "h"))
        for j, a in enumerate(grid):
            prob = np.clip(predict(train(p, LinearConfig(), cfg(a, reg=1e-3)), test), 1e-12, 1 - 1e-12)
            losses[s, j] = -np.mean(yt[10:] * np.log(prob) + (1 - yt[10:]) * np.log(1 - prob))
    mean = losses.mean(0)
    best = mean.argmin()
    assert mean[best] <= mean[0] and mean[best] <= mean[-1]
    assert 0 < best < grid.size - 1


# -- predict ---------------------------------------------------------------

def test_predict_examples():
    feats = Features.from_matrix([[0.0], [math.log(3)], [-2.0]])
    assert list(predict(linear_params([0.0], 0.0), feats)) == [0.5, 0.5, 0.5]
    out = predict(linear_params([1.0], 0.0), feats)
    assert out[0] == 0.5
    assert out[1] == pytest.approx(0.75, abs=1e-15)


def test_predict_rejects_width_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        predict(linear_params([1.0, 2.0]), Features.from_matrix([[0.0]]))


def test_mlp_inference_is_deterministic_and_in_unit_interval():
    rng = np.random.default_rng(0)
    feats = Features.from_matrix(rng.normal(size=(20, 3)))
    params = erm.init_params(MlpConfig(widths=(4, 4, 4), dropout=0.5), feats, "classification", rng)
    a, b = predict(params, feats), predict(params, feats)
    assert np.array_equal(a, b) and np.all((a > 0) & (a < 1))


def test_mlp_regression_predicts_reals():
    p = GroupedDataset(numeric_dataset(np.linspace(0, 1, 30), 5 + 10 * np.linspace(0, 1, 30), "s", "regression"))
    c = cfg(0.0, reg=1e-4, task="regression", opt=OptimizerSpec("adam", 1e-2, batch_size=None, epochs=400))
    params = train(p, MlpConfig(widths=(8, 8, 8), dropout=0.0, batch_norm=False), c)
    pred = predict(params, features_of(p.source))
    assert np.mean(np.abs(pred - p.source.labels)) < 1.0


def test_params_json_roundtrip():
    rng = np.random.default_rng(0)
    feats = Features(rng.normal(size=(5, 2)), rng.integers(0, 3, (5, 1)), (3,))
    params = erm.init_params(MlpConfig(widths=(3, 2, 3)), feats, "regression", rng)
    back = ModelParams.from_dict(json.loads(params.to_json()))
    assert back.digest() == params.digest()
    assert np.array_equal(predict(back, feats), predict(params, feats))


def test_mlp_embedding_default_dims():
    assert MlpConfig().embed_dims((9, 10)) == (3, 4)
    assert MlpConfig().widths == (128, 128, 128) and MlpConfig().dropout == (0.25,) * 3


# -- base learners ---------------------------------------------------------

def test_one_nn_recovers_training_labels():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    y = rng.integers(0, 2, 30).astype(float)
    feats = Features.from_matrix(X)
    model = knn_fit(feats, y, np.ones(30), k=1)
    assert np.array_equal(knn_predict(model, feats), y)


def test_knn_rejects_k_above_train_size():
    with pytest.raises(ValueError):
        knn_fit(Features.from_matrix(np.zeros((3, 1))), [0, 1, 0], np.ones(3), k=4)


def test_knn_weighted_votes():
    feats = Features.from_matrix([[0.0], [0.1], [0.2]])
    model = knn_fit(feats, [1, 0, 0], [0.8, 0.1, 0.1], k=3)
    assert knn_predict(model, Features.from_matrix([[0.05]]))[0] == pytest.approx(0.8)


def _perfect_split_exists(x, y):
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    return any(
        (set(ys[:i]) == {0} and set(ys[i:]) == {1}) or (set(ys[:i]) == {1} and set(ys[i:]) == {0})
        for i in range(1, len(xs)) if xs[i - 1] < xs[i]
    )


def test_forest_stump_on_perfect_split():
    x = np.r_[np.linspace(-2, -0.5, 7), np.linspace(0.5, 2, 9)]
    y = (x > 0).astype(float)
    assert _perfect_split_exists(x, y)
    feats = Features.from_matrix(x)
    model = forest_train(feats, y, np.ones(x.size), n_trees=1, max_depth=1, max_features=None, bootstrap=False,
                         seed=0)
    assert np.mean((forest_predict(model, feats) > 0.5) == y) == 1.0


def test_forest_constant_on_single_label():
    feats = Features.from_matrix(np.random.default_rng(0).normal(size=(10, 2)))
    model = forest_train(feats, np.ones(10), np.ones(10))
    assert np.all(forest_predict(model, feats) == 1.0)


def test_forest_ignores_zero_weight_rows():
    x = np.linspace(-1, 1, 20)
    y = (x > 0).astype(float)
    w = np.where(x > 0, 0.0, 1.0)
    model = forest_train(Features.from_matrix(x), y, w)
    assert np.all(forest_predict(model, Features.from_matrix(x)) == 0.0)


@pytest.mark.parametrize("kind,opts", [("linear", {}), ("knn", {"k": 3}), ("forest", {"n_trees": 5}),
                                       ("mlp", {"widths": [4, 4, 4], "epochs": 3}), ("constant", {})])
def test_learner_spec_fit_predict(kind, opts):
    rng = np.random.default_rng(0)
    feats = Features(rng.normal(size=(30, 2)), rng.integers(0, 2, (30, 1)), (2,))
    y = rng.integers(0, 2, 30)
    fitted = LearnerSpec(kind, opts).fit(feats, y, np.ones(30), "classification", seed=1)
    out = fitted.predict(feats)
    assert out.shape == (30,) and np.all((out >= 0) & (out <= 1))
    assert fitted.digest() == LearnerSpec(kind, opts).fit(feats, y, np.ones(30), "classification", seed=1).digest()


def test_constant_learner_all_equal_labels():
    feats = Features.from_matrix(np.zeros((4, 1)))
    fitted = LearnerSpec("constant").fit(feats, np.ones(4), np.ones(4), "classification")
    assert np.all(fitted.predict(feats) == 1.0)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ValueError):
        OptimizerSpec(step_size=0.0)
    with pytest.raises(ValueError):
        RegularizerSpec(strength=-1.0)
    with pytest.raises(ValueError):
        MlpConfig(dropout=1.0)
