import re

import numpy as np
import pytest

from shiftadapt.data import Column, ColumnKind, Dataset, FeatureSchema


def make_schema(n_cont=2, cats=None, group=None, task="classification"):
    cols = [Column(f"x{i}", ColumnKind.CONTINUOUS) for i in range(n_cont)]
    for name, vocab in (cats or {}).items():
        cols.append(Column(name, ColumnKind.CATEGORICAL, tuple(vocab)))
    if group:
        cols.append(Column(group[0], ColumnKind.GROUP, tuple(group[1])))
    cols.append(Column("y", ColumnKind.LABEL))
    return FeatureSchema(tuple(cols), task=task)


def make_dataset(n=40, n_cont=2, seed=0, task="classification", group=None, prefix="r"):
    rng = np.random.default_rng(seed)
    schema = make_schema(n_cont, group=group, task=task)
    cols = {f"x{i}": list(rng.normal(size=n)) for i in range(n_cont)}
    if group:
        cols[group[0]] = [group[1][i % len(group[1])] for i in range(n)]
    if task == "classification":
        cols["y"] = [i % 2 for i in range(n)]
    else:
        cols["y"] = list(rng.normal(size=n))
    return Dataset.from_columns(schema, cols, [f"{prefix}{i:04d}" for i in range(n)])


@pytest.fixture
def schema_factory():
    return make_schema


@pytest.fixture
def dataset_factory():
    return make_dataset


def numeric_dataset(X, y, prefix, task="classification", cats=None):
    """Preprocessed-style dataset from a numeric matrix (optionally with categorical code columns)."""
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    cols = [Column(f"x{i}", ColumnKind.CONTINUOUS) for i in range(X.shape[1])]
    data = {f"x{i}": list(X[:, i]) for i in range(X.shape[1])}
    for name, (vocab, values) in (cats or {}).items():
        cols.append(Column(name, ColumnKind.CATEGORICAL, tuple(vocab)))
        data[name] = list(values)
    cols.append(Column("y", ColumnKind.LABEL))
    data["y"] = list(np.asarray(y, dtype=float))
    schema = FeatureSchema(tuple(cols), task=task)
    return Dataset.from_columns(schema, data, [f"{prefix}{i:05d}" for i in range(len(y))])


def numeric_pair(Xs, ys, Xt, yt, task="classification", cats_s=None, cats_t=None):
    from shiftadapt.data import GroupedDataset
    return GroupedDataset(numeric_dataset(Xs, ys, "s", task, cats_s), numeric_dataset(Xt, yt, "t", task, cats_t))


def max_rel_fd_error(f, theta, coords, h=1e-5):
    """Largest |analytic - central difference| / max(|a|, |fd|, 1e-8) over ``coords``; ``f`` -> (obj, grad)."""
    _, g = f(theta)
    worst = 0.0
    for j in coords:
        e = np.zeros_like(theta)
        e[j] = h
        fd = (f(theta + e)[0] - f(theta - e)[0]) / (2 * h)
        worst = max(worst, abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1e-8))
    return worst


def _criterion(nodeid):
    name = nodeid.split("::")[-1]
    m = re.match(r"test_a(\d+)_", name)
    return int(m.group(1)) if m else None


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", ""):
                continue
            k = _criterion(rep.nodeid)
            if k is None or (outcome == "passed" and rep.when != "call"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            prev = rows.get(k)
            if prev is None or prev[0] == "PASS":
                rows[k] = ("PASS" if outcome == "passed" else "FAIL", detail)
    if rows:
        terminalreporter.section("acceptance criteria")
        for k in sorted(rows):
            status, detail = rows[k]
            terminalreporter.write_line(f"A{k}: {status}" + (f"  {detail}" if detail else ""))
