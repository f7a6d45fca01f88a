import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from shiftadapt import mmd
from shiftadapt.data import Column, ColumnKind, Dataset, FeatureSchema
from shiftadapt.mmd import DistanceMatrix, Kernel


def brute_mmd(xs, ys, k):
    xs, ys = np.asarray(xs, float).reshape(len(xs), -1), np.asarray(ys, float).reshape(len(ys), -1)
    n = len(xs)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += k(xs[i], xs[j]) + k(ys[i], ys[j]) - k(xs[i], ys[j]) - k(xs[j], ys[i])
    return total / (n * n - n)


def lin(a, b):
    return float(a @ b)


def rbf(h):
    return lambda a, b: float(np.exp(-np.sum((a - b) ** 2) / (2 * h * h)))


def test_linear_example():
    assert mmd.mmd_unbiased([0, 2], [1, 3], Kernel("linear")) == 1.0


def test_identical_samples_give_zero():
    x = np.random.default_rng(0).normal(size=(7, 3))
    assert mmd.mmd_unbiased(x, x.copy(), Kernel("rbf", 1.3)) == 0.0


def test_huge_bandwidth_tends_to_zero():
    rng = np.random.default_rng(0)
    assert abs(mmd.mmd_unbiased(rng.normal(size=10), rng.normal(3, 1, 10), Kernel("rbf", 1e6))) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 10_000))
def test_matches_double_loop_and_swap_symmetric(n, dim, seed):
    rng = np.random.default_rng(seed)
    xs, ys = rng.normal(size=(n, dim)), rng.normal(0.5, 1, (n, dim))
    for kern, f in [(Kernel("rbf", 0.8), rbf(0.8)), (Kernel("linear"), lin)]:
        v = mmd.mmd_unbiased(xs, ys, kern)
        assert v == pytest.approx(brute_mmd(xs, ys, f), abs=1e-12)
        assert v == mmd.mmd_unbiased(ys, xs, kern)


def test_size_and_count_errors():
    with pytest.raises(ValueError):
        mmd.mmd_unbiased([1.0], [2.0], Kernel())
    with pytest.raises(ValueError):
        mmd.mmd_unbiased([1.0, 2.0], [1.0, 2.0, 3.0], Kernel())


def test_kernel_properties():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 2))
    K = Kernel("rbf", 0.7).gram(A, A)
    assert np.allclose(np.diag(K), 1.0) and np.array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-12
    with pytest.raises(ValueError):
        Kernel("rbf", 0.0)


def test_median_bandwidth_examples():
    assert mmd.median_bandwidth([0.0, 2.0]) == 2.0
    assert mmd.median_bandwidth([0.0, 1.0, 3.0]) == 2.0
    assert mmd.median_bandwidth([0.0, 0.0, 5.0]) == 5.0
    assert mmd.median_bandwidth([0.0, 0.0, 0.0, 0.0, 5.0]) == 5.0
    with pytest.raises(ValueError):
        mmd.median_bandwidth([1.0, 1.0])


def test_permuted_statistics_match_direct_recomputation():
    rng = np.random.default_rng(2)
    xs, ys = rng.normal(size=9), rng.normal(size=9)
    kern = Kernel("rbf", 1.0)
    pooled = np.r_[xs, ys]
    K = kern.gram(pooled, pooled)
    perms = np.array([rng.permutation(18) for _ in range(25)])
    got = mmd._permuted_statistics(K, perms, 9)
    want = [mmd.mmd_unbiased(pooled[p[:9]], pooled[p[9:]], kern) for p in perms]
    assert np.allclose(got, want, atol=1e-13, rtol=0)


def test_p_value_formula_audit():
    rng = np.random.default_rng(3)
    res = mmd.permutation_test(rng.normal(size=20), rng.normal(0.3, 1, 20), Kernel("rbf", 1.0), 199, seed=5)
    assert res.p_value == (1 + int((res.null_statistics >= res.statistic).sum())) / 200
    assert 0 < res.p_value <= 1


def test_p_value_floor_when_observed_is_extreme():
    rng = np.random.default_rng(4)
    res = mmd.permutation_test(rng.normal(size=30), rng.normal(6, 1, 30), Kernel("rbf", 1.0), 999, seed=0)
    assert res.null_statistics.max() < res.statistic
    assert res.p_value == 1 / 1000


def test_permutations_lower_limit():
    with pytest.raises(ValueError):
        mmd.permutation_test([0.0, 1.0], [1.0, 2.0], Kernel(), permutations=98)


def test_identical_samples_permutation():
    # The observed statistic is exactly zero; zero is not the smallest achievable
    # value, so p is large but not near one.
    x = np.random.default_rng(5).normal(size=25)
    res = mmd.permutation_test(x, x.copy(), Kernel("rbf", 1.0), 999, seed=1)
    assert res.statistic == 0.0 and res.p_value > 0.05


def test_permutation_deterministic():
    rng = np.random.default_rng(6)
    xs, ys = rng.normal(size=15), rng.normal(size=15)
    a = mmd.permutation_test(xs, ys, Kernel(), 199, seed=3)
    b = mmd.permutation_test(xs, ys, Kernel(), 199, seed=3)
    assert a == b and np.array_equal(a.null_statistics, b.null_statistics)


def test_unbiased_under_null():
    rng = np.random.default_rng(7)
    kern = Kernel("rbf", 1.0)
    vals = np.array([mmd.mmd_unbiased(rng.normal(size=15), rng.normal(size=15), kern) for _ in range(2000)])
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_statistic_increases_with_mean_shift():
    kern = Kernel("rbf", 1.0)
    means = []
    for mu in (0.0, 0.5, 1.0, 2.0):
        vals = []
        for s in range(60):
            rng = np.random.default_rng(1000 + s)
            base = rng.normal(size=(2, 50))
            vals.append(mmd.mmd_unbiased(base[0], base[1] + mu, kern))
        means.append(np.mean(vals))
    assert all(b > a for a, b in zip(means, means[1:]))


def test_result_dict_names_statistic():
    d = mmd.MmdResult(0.1, 0.5, 10, 99).to_dict()
    assert d["statistic_kind"] == "MMD^2_u"


# -- feature map -----------------------------------------------------------

def group_data(X, groups, prefix="r"):
    """Dataset of continuous features plus group-attribute columns ``{name: (vocab, values)}``."""
    X = np.asarray(X, float)
    cols = [Column(f"f{i}", ColumnKind.CONTINUOUS) for i in range(X.shape[1])]
    data = {f"f{i}": list(X[:, i]) for i in range(X.shape[1])}
    for name, (vocab, values) in groups.items():
        cols.append(Column(name, ColumnKind.GROUP, tuple(vocab)))
        data[name] = list(values)
    cols.append(Column("y", ColumnKind.LABEL))
    data["y"] = [0] * len(X)
    return Dataset.from_columns(FeatureSchema(tuple(cols)), data, [f"{prefix}{i:05d}" for i in range(len(X))])


FAST = mmd.FeatureMapConfig(widths=(16, 16, 16), epochs=30, step_size=1e-2, batch_size=64)


def blobs(n, sep, seed, dims=4):
    rng = np.random.default_rng(seed)
    g = np.array(["a", "b"] * (n // 2))
    X = rng.normal(size=(n, dims)) + np.where(g == "a", -sep, sep)[:, None] * (np.arange(dims) == 0)
    return X, g


def test_separable_groups_learned():
    X, g = blobs(400, 3.0, 0)
    fmap = mmd.learn_feature_map(group_data(X[:300], {"site": (["a", "b"], g[:300])}), ["site"], FAST)
    held = group_data(X[300:], {"site": (["a", "b"], g[300:])}, "h")
    acc = np.mean(np.array(fmap.predict_groups(held)["site"]) == g[300:])
    assert acc >= 0.95


def test_shuffled_groups_near_chance():
    X, g = blobs(600, 0.0, 1)
    fmap = mmd.learn_feature_map(group_data(X[:400], {"site": (["a", "b"], g[:400])}), ["site"], FAST)
    held = group_data(X[400:], {"site": (["a", "b"], g[400:])}, "h")
    hits = int(np.sum(np.array(fmap.predict_groups(held)["site"]) == g[400:]))
    lo, hi = stats.binom.ppf([0.005, 0.995], 200, 0.5)
    assert lo <= hits <= hi


def test_two_attributes_share_trunk():
    X, g = blobs(100, 1.0, 2)
    sex = np.array(["M", "F"])[(np.arange(100) % 3 == 0).astype(int)]
    one = mmd.learn_feature_map(group_data(X, {"site": (["a", "b"], g)}), ["site"], FAST)
    two = mmd.learn_feature_map(group_data(X, {"site": (["a", "b"], g), "sex": (["M", "F"], sex)}),
                                ["site", "sex"], FAST)
    assert one.dim == two.dim == 16
    assert two.transform(group_data(X, {"site": (["a", "b"], g), "sex": (["M", "F"], sex)})).shape == (100, 16)
    assert two.params.out_dims == (2, 2)


def test_single_group_attribute_excluded(caplog):
    X, g = blobs(60, 1.0, 3)
    d = group_data(X, {"site": (["a", "b"], g), "race": (["x", "z"], ["x"] * 60)})
    fmap = mmd.learn_feature_map(d, ["site", "race"], FAST)
    assert fmap.attributes == ("site",) and "race" in fmap.excluded
    assert "excluding attribute" in caplog.text


def test_feature_map_deterministic():
    X, g = blobs(80, 1.0, 4)
    d = group_data(X, {"site": (["a", "b"], g)})
    assert np.array_equal(mmd.learn_feature_map(d, ["site"], FAST).transform(d),
                          mmd.learn_feature_map(d, ["site"], FAST).transform(d))


# -- pairwise / dendrogram -------------------------------------------------

def test_pairwise_identical_groups_zero():
    X = np.random.default_rng(5).normal(size=(20, 3))
    d = group_data(np.vstack([X, X]), {"g": (["a", "b"], ["a"] * 20 + ["b"] * 20)})
    dm = mmd.pairwise_mmd(d, "g")
    assert abs(dm.value("a", "b")) <= 1e-12
    assert np.array_equal(dm.matrix, dm.matrix.T) and np.all(np.diag(dm.matrix) == 0)


def test_pairwise_orders_nested_shifts():
    rng = np.random.default_rng(6)
    X = np.vstack([rng.normal(0, 1, (150, 2)), rng.normal(0.5, 1, (120, 2)), rng.normal(1.5, 1, (100, 2))])
    g = ["a"] * 150 + ["b"] * 120 + ["c"] * 100
    dm = mmd.pairwise_mmd(group_data(X, {"g": (["a", "b", "c"], g)}), "g", seed=1)
    assert dm.value("a", "b") < dm.value("b", "c") < dm.value("a", "c")
    assert dm.metadata["statistic"] == "MMD^2_u" and dm.metadata["repeats"] == 10


def test_pairwise_with_feature_map_and_small_group():
    X, g = blobs(60, 2.0, 7)
    g = list(g[:-1]) + ["c"]
    d = group_data(X, {"site": (["a", "b", "c"], g)})
    fmap = mmd.learn_feature_map(d, ["site"], FAST)
    dm = mmd.pairwise_mmd(d, "site", fmap)
    assert dm.groups == ("a", "b") and "c" in dm.excluded
    assert dm.metadata["features"] == "learned"


def test_distance_csv(tmp_path):
    dm = DistanceMatrix(("A", "B"), np.array([[0.0, 0.17], [0.17, 0.0]]))
    dm.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["group", "A", "B"] and float(rows[1][2]) == 0.17


def test_two_group_dendrogram():
    dend = mmd.build_dendrogram(DistanceMatrix(("M", "F"), np.array([[0.0, 0.17], [0.17, 0.0]])))
    assert dend.merges() == [(frozenset({"M"}), frozenset({"F"}), 0.17)] or \
        dend.merges() == [(frozenset({"F"}), frozenset({"M"}), 0.17)]


def _canonical(dend):
    return sorted((frozenset([l, r]), h) for l, r, h in dend.merges())


def test_three_group_average_linkage():
    M = np.array([[0, 1, 4], [1, 0, 4], [4, 4, 0]], float)
    dend = mmd.build_dendrogram(DistanceMatrix(("A", "B", "C"), M))
    assert _canonical(dend) == sorted([(frozenset([frozenset("A"), frozenset("B")]), 1.0),
                                       (frozenset([frozenset({"A", "B"}), frozenset("C")]), 4.0)])


def test_dendrogram_relabel_equivariant():
    rng = np.random.default_rng(8)
    A = rng.random((5, 5))
    M = (A + A.T) / 2
    np.fill_diagonal(M, 0)
    names = tuple("abcde")
    perm = [3, 0, 4, 1, 2]
    d1 = mmd.build_dendrogram(DistanceMatrix(names, M))
    d2 = mmd.build_dendrogram(DistanceMatrix(tuple(names[i] for i in perm), M[np.ix_(perm, perm)]))
    c1 = sorted((l | r, round(h, 12)) for l, r, h in d1.merges())
    c2 = sorted((l | r, round(h, 12)) for l, r, h in d2.merges())
    assert c1 == c2


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_merge_heights_non_decreasing_towards_root(k, seed):
    rng = np.random.default_rng(seed)
    A = rng.random((k, k))
    M = (A + A.T) / 2
    np.fill_diagonal(M, 0)
    dend = mmd.build_dendrogram(DistanceMatrix(tuple(f"g{i}" for i in range(k)), M))

    def check(node, parent_h):
        if "leaf" in node:
            return
        assert node["height"] <= parent_h + 1e-12
        check(node["left"], node["height"])
        check(node["right"], node["height"])

    check(dend.tree, np.inf)
    json.loads(dend.to_json())
    assert dend.metadata["linkage"] == "average"


def test_jsonl_append(tmp_path):
    path = tmp_path / "r.jsonl"
    mmd.append_jsonl(path, [{"a": 1}])
    mmd.append_jsonl(path, [{"a": 2}])
    assert [json.loads(l)["a"] for l in open(path)] == [1, 2]
