"""Command-line entry point: ``geosurv <subcommand>``.

Numeric parameters live in JSON config files (``schema_version: 1``); flags
only pick paths, seeds and parallelism. Logs go to stderr, data to files and
stdout gets a one-line summary.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import (CleaningRules, CohortSchema, EncodingSpec, clean_cohort, encode_covariates,
                   load_cohort, train_test_split, write_cohort)
from .estimators import CoxModel, cox_fit, weibull_ph_fit, write_coefficients
from .experiment import (ExperimentConfig, assemble_report, emit_per_subset, emit_report,
                         encoding_for, read_per_subset, run_statewise)
from .geo import (AttachError, ExpectedSurvivalTable, FallbackPolicy, PopulationTable, attach_state_esr,
                  check_state_codes, write_attach_report)
from .metrics import concordance_index
from .synth import SynthConfig, generate_cohort, generate_tables, truth_record

logger = logging.getLogger("geosurv")

SCHEMA_VERSION = 1


class CliError(RuntimeError):
    pass


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    if not isinstance(data, dict):
        raise CliError(f"{path}: top level must be a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise CliError(f"{path}: unsupported schema_version {version}")
    return data


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_schema(spec) -> CohortSchema:
    """Schema from an inline dict or a JSON file (a ``cohort_schema`` key is honoured)."""
    d = spec if isinstance(spec, dict) else _read_json(spec)
    return CohortSchema.from_dict(d.get("cohort_schema", d))


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------

def cmd_synth(args) -> str:
    raw = _read_json(args.config) if args.config else {}
    raw = raw.get("synth", raw)
    cfg = SynthConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args.out)
    tables = generate_tables(cfg)
    sc = generate_cohort(cfg, tables)
    schema = write_cohort(sc.cohort, out / "cohort.csv")
    tables.pop_frame.to_csv(out / "population.csv", index=False, lineterminator="\n")
    tables.esr_frame.to_csv(out / "esr.csv", index=False, lineterminator="\n")
    truth = truth_record(cfg, tables, sc)
    truth["cohort_schema"] = schema.to_dict()
    truth["schema_version"] = SCHEMA_VERSION
    _write_json(truth, out / "truth.json")
    return f"synth: {len(sc.cohort)} subjects, censored fraction {sc.censored_fraction:.4f} -> {out}"


def _attach(cohort, population, esr, policy: FallbackPolicy, jobs: int):
    pop = PopulationTable.read_csv(population)
    table = ExpectedSurvivalTable.read_csv(esr)
    problems = check_state_codes(cohort, table, pop)
    if problems:
        raise CliError("state codes do not match between files:\n  " + "\n  ".join(problems))
    return attach_state_esr(cohort, table, pop, policy, jobs=jobs)


def cmd_features(args) -> str:
    out = _out_dir(args.out)
    cohort = load_cohort(args.cohort, _load_schema(args.schema))
    policy = FallbackPolicy(args.missing_esr, args.on_failure)
    try:
        enriched, report = _attach(cohort, args.population, args.esr, policy, args.jobs)
    except AttachError as exc:
        write_attach_report(exc.report, out / "attach_report.csv")
        raise
    schema = write_cohort(enriched, out / "cohort_with_esr.csv")
    _write_json({"schema_version": SCHEMA_VERSION, "cohort_schema": schema.to_dict()},
                out / "cohort_with_esr.schema.json")
    write_attach_report(report, out / "attach_report.csv")
    failed = sum(r.status == "failed" for r in report)
    return f"features: {len(enriched)} of {len(cohort)} subjects with state_esr ({failed} failed)"


def _experiment_settings(raw: dict, base: Path):
    """Split a config document into (data paths, cleaning rules, experiment config)."""
    if "config" in raw and "seeds" in raw:  # a run manifest
        raw = raw["config"]
    data = dict(raw.get("data", {}))
    for key in ("cohort", "population", "esr", "schema"):
        if isinstance(data.get(key), str):
            p = Path(data[key])
            data[key] = str(p if p.is_absolute() else (base / p).resolve())
    cleaning = CleaningRules(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in raw.get("cleaning", {}).items()})
    exp = ExperimentConfig.from_dict(raw.get("experiment", {}))
    return data, cleaning, exp


def _prepared_cohort(data: dict, cleaning: CleaningRules, jobs: int, policy=None):
    if "cohort" not in data or "schema" not in data:
        raise CliError("config 'data' needs 'cohort' and 'schema'")
    cohort = load_cohort(data["cohort"], _load_schema(data["schema"]))
    cohort, report = clean_cohort(cohort, cleaning)
    if data.get("population") and data.get("esr"):
        cohort, attach = _attach(cohort, data["population"], data["esr"],
                                 policy or FallbackPolicy(), jobs)
        failed = sum(r.status == "failed" for r in attach)
        if failed:
            logger.warning("%d subjects dropped without state_esr", failed)
    return cohort, report


def cmd_experiment(args) -> str:
    config_path = Path(args.config)
    raw = _read_json(config_path)
    data, cleaning, exp = _experiment_settings(raw, config_path.parent)
    if args.split_seed is not None:
        exp = replace(exp, split_seed=args.split_seed)
    if args.subset_seed is not None:
        exp = replace(exp, subset_seed=args.subset_seed)
    if args.jobs is not None:
        exp = replace(exp, jobs=args.jobs)
    out = _out_dir(args.out)
    resolved = {"schema_version": SCHEMA_VERSION, "data": data,
                "cleaning": {k: list(v) if isinstance(v, tuple) else v
                             for k, v in cleaning.__dict__.items()},
                "experiment": exp.to_dict()}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": "geosurv", "version": __version__,
        "config": resolved,
        "config_sha256": hashlib.sha256(
            json.dumps(resolved, sort_keys=True).encode()).hexdigest(),
        "seeds": {"split_seed": exp.split_seed, "subset_seed": exp.subset_seed},
        "inputs": {k: _sha256(v) for k, v in data.items()
                   if isinstance(v, str) and Path(v).is_file()},
        "status": "failed", "outputs": [],
    }
    try:
        cohort, cleaning_report = _prepared_cohort(data, cleaning, exp.jobs)
        result = run_statewise(cohort, exp)
        emit_report(result.reports, out / "report.csv")
        emit_per_subset(result.reports, out / "per_subset.csv")
        cleaning_report.write_csv(out / "cleaning_report.csv")
        manifest.update(status="ok", outputs=["report.csv", "per_subset.csv", "cleaning_report.csv"],
                        skipped=[{"dataset": d, "reason": r} for d, r in result.skipped])
    finally:
        _write_json(manifest, out / "manifest.json")
    overall = next((r for r in result.reports if r.dataset_name == "Overall"), None)
    tail = f"; Overall t={overall.t:.4g} p={overall.p:.3g}" if overall else ""
    return f"experiment: {len(result.reports)} report(s), {len(result.skipped)} skipped{tail}"


def cmd_report(args) -> str:
    raw = _read_json(args.config) if args.config else {}
    _, _, exp = _experiment_settings(raw, Path(args.config or ".").parent)
    groups = read_per_subset(args.per_subset)
    reports = []
    for name, rows in groups.items():
        n_rows = sum(r.rows for r in rows)
        reports.append(assemble_report(name, rows, exp, n_rows=n_rows))
    out = _out_dir(args.out)
    emit_report(reports, out / "report.csv")
    return f"report: {len(reports)} dataset(s) -> {out / 'report.csv'}"


def cmd_fit(args) -> str:
    config_path = Path(args.config)
    data, cleaning, exp = _experiment_settings(_read_json(config_path), config_path.parent)
    if args.cohort:
        data["cohort"] = args.cohort
    if args.schema:
        data["schema"] = args.schema
    out = _out_dir(args.out)
    cohort, cleaning_report = _prepared_cohort(data, cleaning, exp.jobs)
    m = encode_covariates(cohort, encoding_for(exp, overall=len(cohort.states) > 1))
    train, test = train_test_split(m, exp.test_fraction, exp.split_seed)
    if exp.model_kind == "cox":
        model = cox_fit(train, penalizer=exp.penalizer, ties=exp.ties)
        model.write_json(out / "model.json")
        c = concordance_index(test.time, test.event, model.predict_risk(test)).c
    else:
        model = weibull_ph_fit(train)
        _write_json(model.to_json_dict(), out / "model.json")
        c = concordance_index(test.time, test.event, model.predict_risk(test)).c
    write_coefficients(model.column_names, model.beta, out / "coefficients.csv")
    m.coding.write_json(out / "coding_dictionary.json")
    cleaning_report.write_csv(out / "cleaning_report.csv")
    return f"fit: {exp.model_kind} on {train.n} rows, {m.p} columns; test C-index {c:.4f}"


def cmd_eval(args) -> str:
    model = CoxModel.from_json_dict(_read_json(args.model))
    coding = _read_json(args.coding)
    cohort = load_cohort(args.cohort, _load_schema(args.schema))
    frozen = {f: tuple(levels) for f, levels in coding.items() if f != "schema_version"}
    numeric = tuple(c for c in model.column_names if "=" not in c)
    spec = EncodingSpec(tuple(sorted(frozen)), numeric, frozen_levels=frozen, prune=False)
    m = encode_covariates(cohort, spec)
    res = concordance_index(m.time, m.event, model.predict_risk(m))
    out = _out_dir(args.out)
    _write_json({"schema_version": SCHEMA_VERSION, "c_index": res.c, "concordant": res.concordant,
                 "tied_score": res.tied_score, "discordant": res.discordant, "pairs": res.num,
                 "rows": m.n}, out / "eval.json")
    return f"eval: C-index {res.c:.4f} over {res.num} comparable pairs"


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geosurv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="subcommand", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort and life tables")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="attach state_esr to a cohort")
    s.add_argument("--cohort", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--population", required=True)
    s.add_argument("--esr", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--missing-esr", choices=("renormalize", "nearest_age"), default="renormalize")
    s.add_argument("--on-failure", choices=("drop", "abort"), default="drop")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("fit", help="fit one model on a train/test split")
    s.add_argument("--config", required=True)
    s.add_argument("--cohort")
    s.add_argument("--schema")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="C-index of a saved Cox model on a cohort")
    s.add_argument("--model", required=True)
    s.add_argument("--coding", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="run the with/without-geography protocol")
    s.add_argument("--config", required=True, help="experiment config or a previous manifest.json")
    s.add_argument("--out", required=True)
    s.add_argument("--split-seed", type=int)
    s.add_argument("--subset-seed", type=int)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="rebuild report.csv from per_subset.csv")
    s.add_argument("--per-subset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except Exception as exc:  # every failure becomes a nonzero exit with a message
        logger.error("%s failed: %s", args.subcommand, exc)
        if args.verbose:
            logger.exception("traceback")
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
