"""With/without-geography comparison protocol.

For one dataset, ``run_paired_fit`` fits two models on a shared train/test
split: one on every column, one with the geographic columns removed, and
scores both on the test rows. ``run_subset_ttest`` repeats this on disjoint
subsets of the rows and runs a paired t-test plus a bootstrap interval on the
C-index differences. ``run_statewise`` does that per state and for the pooled
"Overall" dataset.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Cohort, DesignMatrix, EncodingSpec, encode_covariates, train_test_split
from .estimators import cox_fit, weibull_ph_fit
from .metrics import concordance_index
from .stats import BootstrapInterval, bootstrap_ci, c_index_diff, paired_t_test

logger = logging.getLogger(__name__)

OVERALL = "Overall"
REPORT_COLUMNS = ("dataset_name", "rows_per_subset", "t_statistic", "p_value", "ci_lo", "ci_hi",
                  "avg_c_index_improvement")
PER_SUBSET_COLUMNS = ("dataset", "subset_id", "c_with", "c_without", "diff", "rows")


class DegenerateSubsetError(RuntimeError):
    pass


class ArmError(RuntimeError):
    def __init__(self, arm, subset_id, cause):
        self.arm = arm
        self.subset_id = subset_id
        super().__init__(f"arm {arm!r}, subset {subset_id}: {cause}")


@dataclass(frozen=True)
class ExperimentConfig:
    geo_feature_names: tuple[str, ...] = ("state_esr", "reporting_source", "state")
    test_fraction: float = 0.2
    split_seed: int = 101
    penalizer: float = 1e-4
    n_subsets: int = 30
    model_kind: str = "cox"
    subset_seed: int = 0
    ties: str = "efron"
    categorical: tuple[str, ...] = ("sex", "race", "stage", "reporting_source", "state")
    numeric: tuple[str, ...] = ("age", "treatment", "state_esr")
    state_feature: str = "state"
    min_rows_per_subset: int = 30
    ci_level: float = 0.95
    bootstrap_replicates: int = 2000
    include_overall: bool = True
    keep_remainder: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.n_subsets < 2:
            raise ValueError("n_subsets must be >= 2")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.model_kind not in ("cox", "weibull"):
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        for name in ("geo_feature_names", "categorical", "numeric"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class PairedRunResult:
    c_with: float
    c_without: float
    diff: float
    subset_id: int
    rows: int


@dataclass(frozen=True)
class ExperimentReport:
    dataset_name: str
    per_subset: tuple[PairedRunResult, ...]
    t: float
    p: float
    ci: BootstrapInterval
    avg_improvement: float
    rows_per_subset: int
    subset_sizes: tuple[int, ...] = field(default=(), repr=False)


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint32)[0])


def geo_columns(m: DesignMatrix, names) -> list[str]:
    """Columns produced by the named features: the feature itself or its ``f=level`` indicators."""
    out = []
    for c in m.columns:
        base = c.split("=", 1)[0]
        if c in names or base in names:
            out.append(c)
    return out


def _fit_and_score(train: DesignMatrix, test: DesignMatrix, cfg: ExperimentConfig) -> float:
    if cfg.model_kind == "cox":
        model = cox_fit(train, penalizer=cfg.penalizer, ties=cfg.ties)
    else:
        model = weibull_ph_fit(train)
    risk = model.predict_risk(test)
    return concordance_index(test.time, test.event, risk).c


def _degenerate(train: DesignMatrix, test: DesignMatrix) -> str | None:
    if not train.event.any():
        return "no events in train rows"
    if not test.event.any():
        return "no comparable pairs in test rows"
    t_ev = test.time[test.event].min()
    if not np.any(test.time > t_ev):
        return "no comparable pairs in test rows"
    return None


def run_paired_fit(m: DesignMatrix, cfg: ExperimentConfig, subset_id: int | None = None,
                   dataset: str = "dataset") -> PairedRunResult:
    """Both arms on one shared split; returns their test C-indices.

    With ``subset_id=None`` the split uses ``cfg.split_seed`` directly, otherwise
    a seed derived from (split_seed, dataset, subset_id).
    """
    geo = geo_columns(m, cfg.geo_feature_names)
    if not geo:
        raise ValueError(f"no geographic columns among {cfg.geo_feature_names} in the matrix")
    why = None
    for attempt in range(2):
        if subset_id is None and attempt == 0:
            seed = cfg.split_seed
        else:
            seed = derive_seed(cfg.split_seed, dataset, -1 if subset_id is None else subset_id,
                               attempt)
        train, test = train_test_split(m, cfg.test_fraction, seed)
        why = _degenerate(train, test)
        if why is None:
            break
        logger.info("%s subset %s: %s; redrawing split", dataset, subset_id, why)
    else:
        raise DegenerateSubsetError(f"{dataset} subset {subset_id}: {why} after one redraw")

    sid = -1 if subset_id is None else subset_id
    try:
        c_with = _fit_and_score(train, test, cfg)
    except Exception as exc:
        raise ArmError("with_geo", sid, exc) from exc
    try:
        c_without = _fit_and_score(train.drop_columns(geo), test.drop_columns(geo), cfg)
    except Exception as exc:
        raise ArmError("without_geo", sid, exc) from exc
    return PairedRunResult(c_with, c_without, c_index_diff(c_with, c_without), sid, m.n)


def partition_rows(n: int, n_subsets: int, seed: int, keep_remainder: bool = False) -> list[np.ndarray]:
    """Disjoint subsets of a seeded shuffle.

    By default every subset has exactly n // n_subsets rows and the n % n_subsets
    rows at the end of the shuffle are left out. With ``keep_remainder`` the
    subsets cover all rows and differ in size by at most one.
    """
    perm = np.random.default_rng(seed).permutation(n)
    if keep_remainder:
        parts = np.array_split(perm, n_subsets)
    else:
        size = n // n_subsets
        parts = perm[:size * n_subsets].reshape(n_subsets, size)
    return [np.sort(part) for part in parts]


def run_subset_ttest(m: DesignMatrix, cfg: ExperimentConfig, dataset: str = "dataset") -> ExperimentReport:
    need = cfg.n_subsets * cfg.min_rows_per_subset
    if m.n < need:
        raise ValueError(f"{dataset}: {m.n} rows < {need} needed for {cfg.n_subsets} subsets")
    parts = partition_rows(m.n, cfg.n_subsets, derive_seed(cfg.subset_seed, dataset),
                           cfg.keep_remainder)
    results = tuple(run_paired_fit(m.take(rows), cfg, subset_id=k, dataset=dataset)
                    for k, rows in enumerate(parts))
    return assemble_report(dataset, results, cfg, tuple(len(p) for p in parts), m.n)


def assemble_report(dataset: str, results, cfg: ExperimentConfig, subset_sizes=(), n_rows=None):
    results = tuple(sorted(results, key=lambda r: r.subset_id))
    c_with = [r.c_with for r in results]
    c_without = [r.c_without for r in results]
    tt = paired_t_test(c_with, c_without)
    diffs = np.array([r.diff for r in results])
    ci = bootstrap_ci(diffs, cfg.ci_level, cfg.bootstrap_replicates,
                      seed=derive_seed(cfg.subset_seed, dataset, "bootstrap"))
    if n_rows is None:
        n_rows = sum(r.rows for r in results)
    return ExperimentReport(dataset, results, tt.t_statistic, tt.p_value, ci,
                            math.fsum(diffs) / len(diffs), n_rows // len(results),
                            tuple(subset_sizes))


def encoding_for(cfg: ExperimentConfig, overall: bool) -> EncodingSpec:
    if overall:
        return EncodingSpec(cfg.categorical, cfg.numeric)
    drop = cfg.state_feature
    return EncodingSpec(tuple(f for f in cfg.categorical if f != drop),
                        tuple(f for f in cfg.numeric if f != drop))


def _run_task(task):
    name, m, cfg = task
    try:
        return run_subset_ttest(m, cfg, dataset=name)
    except DegenerateSubsetError as exc:
        return exc


@dataclass(frozen=True)
class StatewiseResult:
    reports: tuple[ExperimentReport, ...]
    skipped: tuple[tuple[str, str], ...]


def run_statewise(c: Cohort, cfg: ExperimentConfig) -> StatewiseResult:
    """One report per state with enough rows, plus the pooled Overall report first.

    State datasets drop the state feature; the Overall dataset keeps it as a
    geographic feature. Row order of ``c`` does not matter.
    """
    c = c.sorted_by_id()
    need = cfg.n_subsets * cfg.min_rows_per_subset
    tasks, skipped = [], []
    if cfg.include_overall:
        tasks.append((OVERALL, encode_covariates(c, encoding_for(cfg, True)), cfg))
    for st in c.states:
        sub = c.filter(lambda s, st=st: s.state == st)
        if len(sub) < need:
            skipped.append((st, f"{len(sub)} rows < {need}"))
            logger.warning("skipping state %s: %d rows < %d", st, len(sub), need)
            continue
        state_cfg = replace(cfg, geo_feature_names=tuple(
            g for g in cfg.geo_feature_names if g != cfg.state_feature))
        tasks.append((st, encode_covariates(sub, encoding_for(cfg, False)), state_cfg))

    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            reports = list(ex.map(_run_task, tasks))
    else:
        reports = [_run_task(t) for t in tasks]
    done = []
    for (name, _, _), rep in zip(tasks, reports):
        if isinstance(rep, DegenerateSubsetError):
            if name == OVERALL:
                raise rep
            logger.warning("skipping state %s: %s", name, rep)
            skipped.append((name, str(rep)))
        else:
            done.append(rep)
    return StatewiseResult(tuple(done), tuple(sorted(skipped)))


# ---------------------------------------------------------------------------
# report files

def _num(v) -> str:
    return repr(float(v))


def emit_report(reports, path) -> None:
    """Table-style summary CSV, one row per dataset."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in reports:
                w.writerow([r.dataset_name, r.rows_per_subset, _num(r.t), _num(r.p),
                            _num(r.ci.lo), _num(r.ci.hi), _num(r.avg_improvement)])
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def emit_per_subset(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PER_SUBSET_COLUMNS)
        for r in reports:
            for s in r.per_subset:
                w.writerow([r.dataset_name, s.subset_id, _num(s.c_with), _num(s.c_without),
                            _num(s.diff), s.rows])


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {"dataset_name": row["dataset_name"], "rows_per_subset": int(row["rows_per_subset"])}
        for k in REPORT_COLUMNS[2:]:
            rec[k] = float(row[k])
        out.append(rec)
    return out


def read_per_subset(path) -> dict[str, list[PairedRunResult]]:
    """Per-subset audit rows grouped by dataset, in file order."""
    out: dict[str, list[PairedRunResult]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["dataset"], []).append(PairedRunResult(
                float(row["c_with"]), float(row["c_without"]), float(row["diff"]),
                int(row["subset_id"]), int(row.get("rows") or 0)))
    return out
