"""Command-line entry point.

Every command reads a JSON run configuration, validates it before doing any
work, writes its artifacts atomically into the output directory and finishes
with a manifest of input digests, output digests, seeds and library versions.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import pickle
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import scipy
import sklearn

from . import __version__, config as config_mod, preprocess
from .config import ConfigError
from .data import ColumnKind, Dataset, FeatureSchema, SchemaError, SplitError
from .downstream import BarRecord, bar_analysis, secondary_transfer_eval
from .ensemble import BaggingError, LeakageError
from .evaluation.cv import TRAIN_ALL, ExperimentSpec, MetricReport, audit_isolation, nested_cv
from .evaluation.metrics import UndefinedMetricError, dpd, eod
from .mmd import FeatureMapConfig, Kernel, build_dendrogram, learn_feature_map, pairwise_mmd, permutation_test
from .models.base import TrainingError, features_of
from .models.learners import LearnerSpec
from .pipeline import fit_pipeline
from .synth import generate, mci_scenario, shift_pair_spec
from .theory import BoundInputs, alpha_threshold, bound_table, optimal_alpha

log = logging.getLogger("shiftadapt")

ERROR_CODES: list[tuple[type, str]] = [
    (ConfigError, "config.invalid"),
    (SchemaError, "data.schema"),
    (SplitError, "data.split"),
    (LeakageError, "evaluation.leakage"),
    (UndefinedMetricError, "evaluation.undefined_metric"),
    (BaggingError, "ensemble.fit"),
    (TrainingError, "models.training"),
]


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Run:
    """Output directory, atomic writer and provenance for one command."""

    def __init__(self, command: str, cfg: dict, base: Path, jobs: int):
        self.command = command
        self.cfg = cfg
        self.base = base
        self.jobs = jobs
        out = Path(cfg["output_dir"])
        self.out = out if out.is_absolute() else base / out
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}

    def path(self, rel: str) -> Path:
        p = Path(rel)
        p = p if p.is_absolute() else self.base / p
        self.inputs[rel] = _sha256(p.read_bytes())
        return p

    def write(self, name: str, content: str | bytes) -> Path:
        data = content.encode() if isinstance(content, str) else content
        target = self.out / name
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.outputs[name] = _sha256(data)
        return target

    def finish(self) -> Path:
        cfg = {k: v for k, v in self.cfg.items() if k not in ("output_dir", "jobs")}
        manifest = {
            "command": self.command,
            "config": cfg,
            "config_digest": _sha256(json.dumps(cfg, sort_keys=True).encode()),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "seeds": self.seeds,
            "versions": {"shiftadapt": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "scikit-learn": sklearn.__version__, "python": ".".join(map(str, sys.version_info[:3]))},
        }
        return self.write(f"manifest.{self.command}.json", _dumps(manifest))


# -- shared helpers --------------------------------------------------------

def load_data(run: Run, block: Mapping | None = None) -> Dataset:
    block = block or run.cfg["data"]
    schema = FeatureSchema.from_json(run.path(block["schema"]))
    task = run.cfg["task"]
    if schema.label != task["label"]:
        raise ConfigError(f"task.label {task['label']!r} is not the schema's label column {schema.label!r}")
    if schema.task != task["kind"]:
        raise ConfigError(f"task.kind {task['kind']!r} differs from the schema task {schema.task!r}")
    return Dataset.from_csv(run.path(block["csv"]), schema)


def check_groups(cfg: Mapping, schema: FeatureSchema) -> None:
    g = cfg["groups"]
    try:
        col = schema.column(g["attribute"])
    except SchemaError:
        raise ConfigError(f"groups.attribute {g['attribute']!r} is not a column") from None
    if col.kind is not ColumnKind.GROUP:
        raise ConfigError(f"groups.attribute {g['attribute']!r} is not a group-attribute column")
    for side in ("source", "target"):
        if g[side] not in col.categories:
            raise ConfigError(f"groups.{side} {g[side]!r} is not a category of {g['attribute']!r}")


def experiment(cfg: Mapping, fraction) -> ExperimentSpec:
    model, ev, g = cfg["model"], cfg.get("evaluation", {}), cfg["groups"]
    if model["kind"] == "ensemble":
        learner = LearnerSpec("linear")
        zoo = tuple(LearnerSpec.from_dict(z) for z in model["zoo"])
    else:
        learner = LearnerSpec(model["kind"], model.get("options", {}), model.get("name"))
        zoo = ()
    policy = ev.get("alpha_policy", "grid")
    if fraction in (0, 0.0, TRAIN_ALL):
        policy = "fixed"
    return ExperimentSpec(cfg["task"]["kind"], g["attribute"], g["source"], g["target"], fraction, learner, zoo,
                          policy, ev.get("alpha"), ev.get("search", {}), ev.get("outer_folds", 5),
                          ev.get("inner_folds", 5), ev.get("seed", 0), ev.get("strict_paper_splits", True),
                          ensemble_k=model.get("k", 5), ensemble_repeats=model.get("repeats", 2))


def run_fractions(run: Run, data: Dataset, fractions) -> dict[str, MetricReport]:
    reports = {}
    for f in fractions:
        spec = experiment(run.cfg, f)
        rep = nested_cv(spec, data, jobs=run.jobs)
        audit_isolation(rep, spec, data)
        reports[str(spec.target_fraction)] = rep
    base = reports.get(TRAIN_ALL)
    if base is not None:
        for key, rep in reports.items():
            if key != TRAIN_ALL and len(rep.values) > 1:
                rep.compare(f"vs_{TRAIN_ALL}", base)
    run.seeds["evaluation"] = run.cfg.get("evaluation", {}).get("seed", 0)
    return reports


def reports_csv(reports: Mapping[str, MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=MetricReport.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports.values():
        w.writerow(rep.csv_row())
    return buf.getvalue()


def save_model(run: Run, name: str, pipeline) -> None:
    run.write(name, pickle.dumps(pipeline, protocol=4))


# -- commands --------------------------------------------------------------

def cmd_preprocess(run: Run) -> None:
    data = load_data(run)
    state, out = preprocess.fit_transform(data)
    run.write("preprocess_state.json", _dumps(state.to_dict()))
    run.write("schema.preprocessed.json", _dumps(out.schema.to_dict()))
    buf = io.StringIO()
    out.to_csv(buf)
    run.write("preprocessed.csv", buf.getvalue())


def cmd_mmd(run: Run) -> None:
    data = load_data(run)
    m = run.cfg["mmd"]
    seed = m.get("seed", 0)
    run.seeds["mmd"] = seed
    for a in m["attributes"]:
        try:
            col = data.schema.column(a)
        except SchemaError:
            raise ConfigError(f"mmd.attributes: unknown column {a!r}") from None
        if col.kind is not ColumnKind.GROUP:
            raise ConfigError(f"mmd.attributes: {a!r} is not a group-attribute column")
    prepared = preprocess.fit_transform(data)[1]
    fmap = None
    if m.get("features", "learned") == "learned":
        fm_cfg = FeatureMapConfig(widths=tuple(m.get("widths", (64, 64, 64))), epochs=m.get("epochs", 40), seed=seed)
        fmap = learn_feature_map(prepared, m["attributes"], fm_cfg)
    phi = fmap.transform(prepared) if fmap is not None else features_of(prepared).one_hot()
    summary: dict[str, Any] = {"statistic": "MMD^2_u", "linkage": "average", "attributes": {},
                               "feature_map_excluded": dict(fmap.excluded) if fmap else {}}
    jsonl = io.StringIO()
    perms = m.get("permutations", 10_000)
    for attr in m["attributes"]:
        if fmap is not None and attr in fmap.excluded:
            continue
        dm = pairwise_mmd(prepared, attr, fmap, seed=seed, repeats=m.get("repeats", 10),
                          max_per_group=m.get("max_per_group"))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group"] + list(dm.groups))
        for gname, row in zip(dm.groups, dm.matrix):
            w.writerow([gname] + [repr(float(v)) for v in row])
        run.write(f"mmd_distances_{attr}.csv", buf.getvalue())
        run.write(f"dendrogram_{attr}.json", build_dendrogram(dm).to_json())
        kernel = Kernel("rbf", dm.metadata["bandwidth"])
        names = prepared.categories_of(attr)
        rng = np.random.default_rng(seed)
        tests = []
        for i, a in enumerate(dm.groups):
            for b in dm.groups[i + 1:]:
                ia = np.array([k for k, v in enumerate(names) if v == a])
                ib = np.array([k for k, v in enumerate(names) if v == b])
                size = min(ia.size, ib.size, m.get("max_per_group") or ia.size)
                sa = np.sort(rng.choice(ia, size, replace=False))
                sb = np.sort(rng.choice(ib, size, replace=False))
                res = permutation_test(phi[sa], phi[sb], kernel, perms, seed=seed)
                rec = {"attribute": attr, "group_a": a, "group_b": b, **res.to_dict()}
                tests.append(rec)
                jsonl.write(json.dumps(rec, sort_keys=True) + "\n")
        summary["attributes"][attr] = {"groups": list(dm.groups), "excluded_groups": dict(dm.excluded),
                                       "metadata": dict(dm.metadata), "tests": tests}
    run.write("mmd_results.jsonl", jsonl.getvalue())
    run.write("mmd_summary.json", _dumps(summary))


def cmd_train(run: Run) -> None:
    data = load_data(run)
    check_groups(run.cfg, data.schema)
    reports = run_fractions(run, data, [0.0])
    pipe, alpha, _ = fit_pipeline(experiment(run.cfg, 0.0), data, jobs=run.jobs)
    save_model(run, "model.train.pkl", pipe)
    run.write("train.json", _dumps({"reports": {k: r.to_dict() for k, r in reports.items()},
                                     "final_model": {"alpha": alpha, "digest": pipe.digest()}}))


def _adapt_fractions(cfg):
    return cfg.get("evaluation", {}).get("fractions", [0.0, 0.1, 0.2, TRAIN_ALL])


def cmd_adapt(run: Run) -> None:
    data = load_data(run)
    check_groups(run.cfg, data.schema)
    fractions = _adapt_fractions(run.cfg)
    reports = run_fractions(run, data, fractions)
    final_f = next((f for f in fractions if f not in (0, 0.0, TRAIN_ALL)), 0.2)
    pipe, alpha, used = fit_pipeline(experiment(run.cfg, final_f), data, jobs=run.jobs)
    save_model(run, "model.adapt.pkl", pipe)
    run.write("adapt.json", _dumps({"reports": {k: r.to_dict() for k, r in reports.items()},
                                     "final_model": {"fraction": final_f, "alpha": alpha,
                                                     "n_target_rows": len(used), "digest": pipe.digest()}}))
    run.write("adapt.csv", reports_csv(reports))


def fairness_section(reports: Mapping[str, MetricReport], data: Dataset, attribute: str, threshold: float) -> dict:
    groups = dict(zip(data.row_ids, data.categories_of(attribute)))
    labels = dict(zip(data.row_ids, data.labels))
    out = {}
    for key, rep in reports.items():
        preds = {}
        for f in rep.folds:
            preds.update(f.predictions)
        ids = sorted(preds)
        yhat = np.array([preds[i] >= threshold for i in ids], dtype=float)
        g = [groups[i] or "unknown" for i in ids]
        y = np.array([labels[i] for i in ids])
        entry: dict[str, Any] = {"attribute": attribute, "threshold": threshold, "n": len(ids)}
        for name, fn in (("dpd", lambda: dpd(yhat, g, detail=True)), ("eod", lambda: eod(yhat, y, g, detail=True))):
            try:
                gap = fn()
                entry[name] = {"value": gap.value, "rates": gap.rates, "excluded": gap.excluded}
            except UndefinedMetricError as exc:
                entry[name] = {"value": None, "note": str(exc)}
        out[key] = entry
    return out


def cmd_evaluate(run: Run) -> None:
    data = load_data(run)
    check_groups(run.cfg, data.schema)
    ev = run.cfg.get("evaluation", {})
    reports = run_fractions(run, data, _adapt_fractions(run.cfg))
    result: dict[str, Any] = {"reports": {k: r.to_dict() for k, r in reports.items()}}
    attr = ev.get("fairness_attribute")
    if attr:
        if data.schema.task != "classification":
            result["fairness"] = {"note": "fairness gaps need binary predictions (classification)"}
        else:
            if attr not in data.schema.names or data.schema.column(attr).kind is not ColumnKind.GROUP:
                raise ConfigError(f"evaluation.fairness_attribute {attr!r} is not a group-attribute column")
            result["fairness"] = fairness_section(reports, data, attr, ev.get("threshold", 0.5))
    run.write("evaluation.json", _dumps(result))
    run.write("evaluation.csv", reports_csv(reports))


def cmd_secondary(run: Run) -> None:
    data = load_data(run)
    check_groups(run.cfg, data.schema)
    sec_cfg = run.cfg["secondary"]
    sec = load_data(run, sec_cfg)
    if sec.schema.names != data.schema.names:
        raise ConfigError("secondary data must share the primary data's columns")
    frac = sec_cfg.get("primary_fraction", 0.1)
    pipe, alpha, _ = fit_pipeline(experiment(run.cfg, frac), data, jobs=run.jobs)
    seed = run.cfg.get("evaluation", {}).get("seed", 0)
    run.seeds["secondary"] = seed
    result: dict[str, Any] = {"primary": {"fraction": frac, "alpha": alpha, "digest": pipe.digest()}}
    if data.schema.task == "classification":
        pri = sec_cfg.get("priors", "empirical")
        rep = secondary_transfer_eval(pipe, sec, sec_cfg.get("label_fraction", 0.2), sec_cfg.get("folds", 5),
                                      seed, pri if isinstance(pri, str) else tuple(pri))
        result["secondary_tasks"] = rep.to_dict()
    covs = sec_cfg.get("bar_covariates", [])
    if covs:
        if data.schema.task != "regression":
            raise ConfigError("bar_covariates need a regression (age) primary task")
        with open(run.path(sec_cfg["csv"]), newline="") as fh:
            rows = {r[sec.schema.id_column]: r for r in csv.DictReader(fh)}
        missing = [c for c in covs if c not in next(iter(rows.values()))]
        if missing:
            raise ConfigError(f"secondary.bar_covariates: columns {missing} absent from the secondary CSV")
        preds = pipe.predict(sec)
        records = [BarRecord(i, float(p), float(a)) for i, p, a in zip(sec.row_ids, preds, sec.labels)]
        values = {c: [float(rows[i][c]) if rows[i][c] != "" else None for i in sec.row_ids] for c in covs}
        result["bar_correlations"] = bar_analysis(records, values, sec_cfg.get("expected_signs"))
    run.write("secondary.json", _dumps(result))


def cmd_bounds(run: Run) -> None:
    b = dict(run.cfg["bounds"])
    r_star = b.pop("target_opt_risk", 0.0)
    inputs = BoundInputs(**b)
    table = bound_table(inputs, r_star)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["alpha", "rhs"], lineterminator="\n")
    w.writeheader()
    for row in table:
        w.writerow({"alpha": repr(row["alpha"]), "rhs": repr(row["rhs"])})
    run.write("bounds.csv", buf.getvalue())
    thr = alpha_threshold(inputs)
    run.write("bounds.json", _dumps({"inputs": asdict(inputs), "target_opt_risk": r_star,
                                     "optimal_alpha": optimal_alpha(inputs),
                                     "threshold_n": None if thr == float("inf") else thr}))


def cmd_synth(run: Run) -> None:
    s = run.cfg["synth"]
    p = dict(s.get("params", {}))
    run.seeds["synth"] = p.get("seed", 0)
    if s["preset"] == "shift_pair":
        missing = p.pop("missing_rate", 0.0)
        shift = p.pop("shift", 1.5)
        m, n = p.pop("m", 1000), p.pop("n", 200)
        spec = shift_pair_spec(shift, m, n, **p)
        if missing:
            spec = replace(spec, missing_rate=missing)
        datasets = {"data": generate(spec)}
    else:
        primary, secondary = mci_scenario(**p)
        datasets = {"data": primary, "secondary": secondary}
    for name, ds in datasets.items():
        buf = io.StringIO()
        ds.to_csv(buf)
        run.write(f"{name}.csv", buf.getvalue())
        run.write(f"{name}.schema.json", _dumps(ds.schema.to_dict()))


REPORT_SOURCES = ("train.json", "adapt.json", "evaluation.json", "secondary.json", "mmd_summary.json",
                  "bounds.json")


def cmd_report(run: Run) -> None:
    report: dict[str, Any] = {}
    rows = []
    for name in REPORT_SOURCES:
        p = run.out / name
        if not p.exists():
            continue
        run.inputs[name] = _sha256(p.read_bytes())
        content = json.loads(p.read_text())
        report[name.removesuffix(".json")] = content
        for key, rep in content.get("reports", {}).items():
            r = MetricReport.from_dict(rep)
            rows.append({"source_file": name, **r.csv_row()})
    if not report:
        raise CliError("report.empty", f"no command outputs found in {run.out}")
    run.write("report.json", _dumps(report))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("source_file",) + MetricReport.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    run.write("report.csv", buf.getvalue())


COMMANDS: dict[str, Callable[[Run], None]] = {
    "preprocess": cmd_preprocess, "mmd": cmd_mmd, "train": cmd_train, "adapt": cmd_adapt,
    "evaluate": cmd_evaluate, "secondary": cmd_secondary, "bounds": cmd_bounds, "synth": cmd_synth,
    "report": cmd_report,
}


def demo_config(seed: int = 0) -> dict:
    """Small end-to-end configuration: synthesise, test for shift, adapt, report."""
    return {
        "task": {"kind": "classification", "label": "y"},
        "data": {"csv": "data.csv", "schema": "data.schema.json"},
        "groups": {"attribute": "group", "source": "source", "target": "target"},
        "model": {"kind": "linear"},
        "evaluation": {"fractions": [0.0, 0.1, 0.2, TRAIN_ALL], "alpha_policy": "grid", "seed": seed},
        "mmd": {"attributes": ["group"], "permutations": 999, "epochs": 10, "widths": [16, 16, 16],
                "max_per_group": 300, "seed": seed},
        "synth": {"preset": "shift_pair", "params": {"shift": 1.5, "m": 800, "n": 200, "seed": seed,
                                                     "missing_rate": 0.02}},
        "output_dir": ".",
    }


def run_command(command: str, cfg: dict, base: Path, jobs: int) -> Path:
    run = Run(command, cfg, base, jobs)
    COMMANDS[command](run)
    return run.finish()


def cmd_demo(out_dir: Path, seed: int, jobs: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_mod.prepare(demo_config(seed))
    cfg["output_dir"] = "."
    (out_dir / "demo_config.json").write_text(_dumps(cfg))
    for command in ("synth", "mmd", "adapt", "report"):
        config_mod.validate(cfg, command)
        run_command(command, cfg, out_dir, jobs)


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.code
    for cls, code in ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return f"{type(exc).__module__.replace('shiftadapt.', '')}.{type(exc).__name__}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftadapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", type=Path, help="run configuration JSON")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
    p = sub.add_parser("demo", help="bundled end-to-end run: synth, mmd, adapt, report")
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None)
    sub.add_parser("schema", help="print the run-configuration JSON schema")
    return parser


def _jobs(arg: int | None, cfg: Mapping | None = None) -> int:
    if arg is not None:
        return max(1, arg)
    if os.environ.get("SHIFTADAPT_JOBS"):
        return max(1, int(os.environ["SHIFTADAPT_JOBS"]))
    if cfg and cfg.get("jobs"):
        return int(cfg["jobs"])
    return os.cpu_count() or 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "schema":
            sys.stdout.write(_dumps(config_mod.SCHEMA))
            return 0
        if args.command == "demo":
            out = args.output_dir or Path(os.environ.get("SHIFTADAPT_OUTPUT_DIR", "shiftadapt-demo"))
            cmd_demo(out, args.seed, _jobs(args.jobs))
            print(out / "report.json")
            return 0
        cfg, base = config_mod.load(args.config, args.command)
        print(run_command(args.command, cfg, base, _jobs(args.jobs, cfg)))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure maps to a coded exit
        code = _error_code(exc)
        print(f"error[{code}]: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2 if code == "config.invalid" else 1


if __name__ == "__main__":
    raise SystemExit(main())
