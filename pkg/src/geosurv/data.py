"""Subjects, cohorts and the cleaning / one-hot encoding pipeline.

A :class:`Cohort` is the registry-shaped roster loaded from CSV. ``clean_cohort``
applies the row and column filters, ``encode_covariates`` turns the cohort into
a numeric :class:`DesignMatrix` and ``train_test_split`` partitions rows.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

CENSORING_KINDS = ("right", "left", "interval")
REQUIRED_ROLES = ("age", "sex", "time", "event", "state")
OPTIONAL_ROLES = ("id", "race", "diagnosis_year", "county", "censoring_kind")

_TOPCODED_AGE = re.compile(r"^\s*\d+\s*\+\s*$")
_TRUE = {"1", "true", "t", "yes", "y", "dead", "death"}
_FALSE = {"0", "false", "f", "no", "n", "alive", "censored"}
_MISSING = {"", "na", "nan", "none", "null", "unknown"}


class SchemaError(ValueError):
    """A required column role is missing from the schema or the file header."""


class RowParseError(ValueError):
    """One or more data rows could not be parsed; ``errors`` holds (row, message)."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        head = "; ".join(f"row {r}: {m}" for r, m in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} unparseable row(s): {head}{more}")


class EncodingError(ValueError):
    """A level was not seen when the encoding was frozen."""


@dataclass(frozen=True)
class Subject:
    id: str
    age: int | None
    sex: str
    race: str | None
    diagnosis_year: int | None
    state: str
    county: str | None
    time: float
    event: bool
    categorical_covariates: Mapping[str, str | None] = field(default_factory=dict)
    numeric_covariates: Mapping[str, float | None] = field(default_factory=dict)
    censoring_kind: str = "right"
    interval: tuple[float, float] | None = None
    # verbatim age field, kept so top-coded bands ("85+") can be reported by clean_cohort
    age_raw: str | None = None

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError(f"subject {self.id}: time must be >= 0, got {self.time}")
        if self.censoring_kind not in CENSORING_KINDS:
            raise ValueError(f"subject {self.id}: unknown censoring kind {self.censoring_kind!r}")
        if self.event and self.censoring_kind != "right":
            raise ValueError(f"subject {self.id}: observed events must be right/exact records")

    def value(self, feature: str):
        """Look up a feature by name across the fixed fields and covariate maps."""
        if feature in ("age", "sex", "race", "diagnosis_year", "state", "county"):
            return getattr(self, feature)
        if feature in self.categorical_covariates:
            return self.categorical_covariates[feature]
        if feature in self.numeric_covariates:
            return self.numeric_covariates[feature]
        raise KeyError(feature)

    def has_feature(self, feature: str) -> bool:
        try:
            self.value(feature)
        except KeyError:
            return False
        return True


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[Subject, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            seen, dupes = set(), []
            for i in ids:
                if i in seen:
                    dupes.append(i)
                seen.add(i)
            raise ValueError(f"duplicate subject ids: {dupes[:5]}")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def states(self) -> list[str]:
        return sorted({s.state for s in self.subjects})

    def filter(self, pred, provenance: str | None = None) -> "Cohort":
        return Cohort(tuple(s for s in self.subjects if pred(s)),
                      self.provenance if provenance is None else provenance)

    def sorted_by_id(self) -> "Cohort":
        return Cohort(tuple(sorted(self.subjects, key=lambda s: s.id)), self.provenance)


# ---------------------------------------------------------------------------
# loading

@dataclass(frozen=True)
class CohortSchema:
    """Maps column roles to CSV header names.

    ``categorical`` and ``numeric`` list further covariate columns; they are
    stored in the subject's covariate maps under their column name.
    """

    roles: Mapping[str, str]
    categorical: tuple[str, ...] = ()
    numeric: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortSchema":
        d = dict(d)
        cat = tuple(d.pop("categorical", ()))
        num = tuple(d.pop("numeric", ()))
        d.pop("schema_version", None)
        roles = {k: v for k, v in d.items() if v is not None}
        missing = [r for r in REQUIRED_ROLES if r not in roles]
        if missing:
            raise SchemaError(f"schema lacks required role(s): {', '.join(missing)}")
        unknown = set(roles) - set(REQUIRED_ROLES) - set(OPTIONAL_ROLES)
        if unknown:
            raise SchemaError(f"unknown role(s) in schema: {', '.join(sorted(unknown))}")
        return cls(roles, cat, num)

    @classmethod
    def from_json(cls, path) -> "CohortSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {**self.roles, "categorical": list(self.categorical), "numeric": list(self.numeric)}


def _missing(v: str | None) -> bool:
    return v is None or v.strip().lower() in _MISSING


def parse_event(raw: str) -> bool:
    v = raw.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"unparseable event indicator {raw!r}")


def _parse_int(raw: str) -> int:
    f = float(raw)
    if not f.is_integer():
        raise ValueError(f"expected an integer, got {raw!r}")
    return int(f)


def load_cohort(path, schema: CohortSchema | Mapping, skip_bad_rows: bool = False) -> Cohort:
    """Read a header-row CSV into a :class:`Cohort`.

    Rows whose time/event/age fail to parse are collected and raised together
    as :class:`RowParseError` (row numbers count the header as row 1). With
    ``skip_bad_rows`` they are logged and skipped instead. Top-coded ages such
    as ``"85+"`` are kept here with ``age=None``; ``clean_cohort`` drops them.
    """
    if not isinstance(schema, CohortSchema):
        schema = CohortSchema.from_dict(schema)
    path = Path(path)
    roles = schema.roles
    subjects: list[Subject] = []
    errors: list[tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = list(roles.items()) + [(c, c) for c in schema.categorical + schema.numeric]
        absent = [role for role, col in wanted if col not in header]
        if absent:
            raise SchemaError(f"{path}: column(s) for role(s) {', '.join(absent)} not in header")
        for rownum, row in enumerate(reader, start=2):
            try:
                subjects.append(_row_to_subject(row, rownum, schema))
            except ValueError as exc:
                errors.append((rownum, str(exc)))
    if errors:
        if not skip_bad_rows:
            raise RowParseError(errors)
        for r, m in errors:
            logger.warning("%s row %d skipped: %s", path, r, m)
    return Cohort(tuple(subjects), provenance=str(path))


def _row_to_subject(row: Mapping[str, str], rownum: int, schema: CohortSchema) -> Subject:
    roles = schema.roles

    def get(role):
        col = roles.get(role)
        return None if col is None else row.get(col)

    raw_time = get("time")
    if _missing(raw_time):
        raise ValueError("missing time")
    time = float(raw_time)
    if not math.isfinite(time) or time < 0:
        raise ValueError(f"time must be a finite non-negative number, got {raw_time!r}")
    event = parse_event(get("event") or "")

    raw_age = get("age")
    if _missing(raw_age):
        age = None
    elif _TOPCODED_AGE.match(raw_age):
        age = None
    else:
        age = _parse_int(raw_age)

    raw_year = get("diagnosis_year")
    year = None if _missing(raw_year) else _parse_int(raw_year)
    kind = get("censoring_kind")
    kind = "right" if _missing(kind) else kind.strip().lower()

    cats = {c: (None if _missing(row[c]) else row[c].strip()) for c in schema.categorical}
    nums = {}
    for c in schema.numeric:
        nums[c] = None if _missing(row[c]) else float(row[c])

    def opt(role):
        v = get(role)
        return None if _missing(v) else v.strip()

    sid = opt("id") or str(rownum - 1)
    return Subject(
        id=sid, age=age, sex=(get("sex") or "").strip(), race=opt("race"),
        diagnosis_year=year, state=(get("state") or "").strip(), county=opt("county"),
        time=time, event=event, categorical_covariates=cats, numeric_covariates=nums,
        censoring_kind=kind, age_raw=None if raw_age is None else raw_age.strip(),
    )


def write_cohort(cohort: Cohort, path) -> CohortSchema:
    """Write a cohort as CSV with role names as headers; returns the matching schema."""
    cats = sorted({k for s in cohort for k in s.categorical_covariates})
    nums = sorted({k for s in cohort for k in s.numeric_covariates})
    cols = ["id", "age", "sex", "race", "diagnosis_year", "state", "county", *cats, *nums,
            "time", "event"]

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return "1" if v else "0"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in cohort:
            age = s.age if s.age is not None else s.age_raw
            row = [s.id, age, s.sex, s.race, s.diagnosis_year, s.state, s.county]
            row += [s.categorical_covariates.get(c) for c in cats]
            row += [s.numeric_covariates.get(c) for c in nums]
            row += [s.time, s.event]
            w.writerow([fmt(v) for v in row])
    roles = {r: r for r in ("id", "age", "sex", "race", "diagnosis_year", "state", "county",
                            "time", "event")}
    return CohortSchema(roles, tuple(cats), tuple(nums))


# ---------------------------------------------------------------------------
# cleaning

@dataclass(frozen=True)
class CleaningRules:
    """Row and column filters.

    required: features every kept row must have (after era-sparse columns are
    dropped). era_sparse: features to drop outright; with ``detect_era_sparse``
    any covariate absent for every subject diagnosed before some year later
    than the cohort's first year is dropped as well.
    """

    required: tuple[str, ...] = ()
    era_sparse: tuple[str, ...] = ()
    detect_era_sparse: bool = True


@dataclass(frozen=True)
class CleaningReport:
    dropped_rows: tuple[tuple[str, str], ...] = ()
    dropped_features: tuple[tuple[str, str], ...] = ()

    def __bool__(self):
        return bool(self.dropped_rows or self.dropped_features)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "reason"])
            for rid, reason in self.dropped_rows:
                w.writerow([rid, reason])
            for feat, reason in self.dropped_features:
                w.writerow([f"column:{feat}", reason])


def _covariate_names(cohort: Cohort) -> list[str]:
    names = set()
    for s in cohort:
        names.update(s.categorical_covariates)
        names.update(s.numeric_covariates)
    return sorted(names)


def era_sparse_features(cohort: Cohort) -> dict[str, int]:
    """Covariates that only start being recorded after the cohort's first year.

    Returns feature -> first year with any recorded value.
    """
    years = [s.diagnosis_year for s in cohort if s.diagnosis_year is not None]
    if not years:
        return {}
    first_year = min(years)
    out = {}
    for feat in _covariate_names(cohort):
        present = [s.diagnosis_year for s in cohort
                   if s.diagnosis_year is not None and s.value(feat) is not None
                   and feat in (*s.categorical_covariates, *s.numeric_covariates)]
        if present and min(present) > first_year:
            out[feat] = min(present)
    return out


def _drop_features(s: Subject, feats: set[str]) -> Subject:
    if not feats:
        return s
    cats = {k: v for k, v in s.categorical_covariates.items() if k not in feats}
    nums = {k: v for k, v in s.numeric_covariates.items() if k not in feats}
    if len(cats) == len(s.categorical_covariates) and len(nums) == len(s.numeric_covariates):
        return s
    return replace(s, categorical_covariates=cats, numeric_covariates=nums)


def clean_cohort(c: Cohort, rules: CleaningRules = CleaningRules()) -> tuple[Cohort, CleaningReport]:
    """Drop top-coded ages, era-sparse covariates and rows missing required values.

    Idempotent: cleaning a cleaned cohort returns it unchanged with an empty
    report.
    """
    dropped_rows: list[tuple[str, str]] = []
    kept = []
    for s in c:
        if s.age is None:
            why = f"top-coded age {s.age_raw!r}" if s.age_raw and _TOPCODED_AGE.match(s.age_raw) \
                else "missing age"
            dropped_rows.append((s.id, why))
        else:
            kept.append(s)
    stage1 = Cohort(tuple(kept), c.provenance)

    drop_feats: dict[str, str] = {f: "flagged era-sparse" for f in rules.era_sparse
                                  if f in _covariate_names(stage1)}
    if rules.detect_era_sparse:
        for f, year in era_sparse_features(stage1).items():
            drop_feats.setdefault(f, f"recorded only from {year} on")
    feats = set(drop_feats)
    subjects = [_drop_features(s, feats) for s in stage1]

    # a required feature carried by nobody was removed earlier (or never existed)
    present = set(_covariate_names(stage1)) | {"age", "sex", "race", "diagnosis_year", "state", "county"}
    required = [f for f in rules.required if f not in feats and f in present]
    final = []
    for s in subjects:
        miss = [f for f in required if not s.has_feature(f) or s.value(f) is None]
        if miss:
            dropped_rows.append((s.id, "missing " + ", ".join(miss)))
        else:
            final.append(s)
    report = CleaningReport(tuple(dropped_rows), tuple(sorted(drop_feats.items())))
    if report:
        logger.info("cleaning dropped %d rows and %d features", len(dropped_rows), len(feats))
    return Cohort(tuple(final), c.provenance), report


# ---------------------------------------------------------------------------
# encoding

@dataclass(frozen=True)
class CodingDictionary:
    """(feature, level) -> (integer code, encoded column name or None).

    Codes number the lexicographically sorted levels from 0; the level with
    code 0 is the dropped reference level and has no column.
    """

    entries: Mapping[tuple[str, str], tuple[int, str | None]]

    def features(self) -> list[str]:
        return sorted({f for f, _ in self.entries})

    def levels(self, feature: str) -> list[str]:
        lv = [(code, lvl) for (f, lvl), (code, _) in self.entries.items() if f == feature]
        return [lvl for _, lvl in sorted(lv)]

    def column(self, feature: str, level: str) -> str | None:
        return self.entries[(feature, level)][1]

    def decode(self, feature: str, row: Mapping[str, float]) -> str:
        """Recover a level from a row's one-hot block (column name -> value)."""
        levels = self.levels(feature)
        hits = [lvl for lvl in levels
                if (col := self.column(feature, lvl)) is not None and row.get(col, 0) == 1]
        if len(hits) > 1:
            raise ValueError(f"{feature}: more than one indicator set: {hits}")
        return hits[0] if hits else levels[0]

    def to_json_dict(self) -> dict:
        out: dict[str, dict[str, int]] = {}
        for (f, lvl), (code, _) in sorted(self.entries.items()):
            out.setdefault(f, {})[lvl] = code
        return out

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class EncodingSpec:
    categorical: tuple[str, ...] = ()
    numeric: tuple[str, ...] = ()
    # feature -> allowed levels; when given, unseen levels raise EncodingError
    frozen_levels: Mapping[str, tuple[str, ...]] | None = None
    prune: bool = True


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    columns: tuple[str, ...]
    values: np.ndarray
    time: np.ndarray
    event: np.ndarray
    coding: CodingDictionary = field(default_factory=lambda: CodingDictionary({}))
    row_ids: tuple[str, ...] = ()
    # per-row censoring kind; empty means all right-censored
    censoring: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1) if len(self.columns) == 1 else values.reshape(len(values), -1)
        n = len(self.time)
        if values.shape != (n, len(self.columns)):
            raise ValueError(f"values shape {values.shape} does not match "
                             f"({n}, {len(self.columns)})")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event, dtype=bool)
        row_ids = tuple(self.row_ids) if self.row_ids else tuple(str(i) for i in range(n))
        for a in (values, time, event):
            a.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "censoring", tuple(self.censoring) or ("right",) * n)

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def p(self) -> int:
        return len(self.columns)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def take(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows, dtype=int)
        return DesignMatrix(self.columns, self.values[rows], self.time[rows], self.event[rows],
                            self.coding, tuple(self.row_ids[i] for i in rows),
                            tuple(self.censoring[i] for i in rows))

    def drop_columns(self, names: Iterable[str]) -> "DesignMatrix":
        names = set(names)
        keep = [i for i, c in enumerate(self.columns) if c not in names]
        return DesignMatrix(tuple(self.columns[i] for i in keep), self.values[:, keep],
                            self.time, self.event, self.coding, self.row_ids, self.censoring)


def _sort_levels(levels: Iterable) -> list[str]:
    return sorted({str(v) for v in levels})


def encode_covariates(c: Cohort, spec: EncodingSpec) -> DesignMatrix:
    """One-hot encode categoricals (k levels -> k-1 columns) and pass numerics through.

    The lexicographically first level of each categorical is the reference.
    Collinear columns are pruned afterwards unless ``spec.prune`` is false.
    """
    subjects = c.subjects
    n = len(subjects)
    cols: list[str] = []
    blocks: list[np.ndarray] = []
    entries: dict[tuple[str, str], tuple[int, str | None]] = {}

    for feat in spec.categorical:
        raw = []
        for s in subjects:
            v = s.value(feat) if s.has_feature(feat) else None
            if v is None:
                raise EncodingError(f"subject {s.id} has no value for categorical {feat!r}")
            raw.append(str(v))
        if spec.frozen_levels is not None and feat in spec.frozen_levels:
            levels = _sort_levels(spec.frozen_levels[feat])
            unseen = sorted(set(raw) - set(levels))
            if unseen:
                raise EncodingError(f"feature {feat!r}: unseen level(s) {unseen}")
        else:
            levels = _sort_levels(raw)
        index = {lvl: k for k, lvl in enumerate(levels)}
        codes = np.array([index[v] for v in raw], dtype=int)
        for k, lvl in enumerate(levels):
            name = None if k == 0 else f"{feat}={lvl}"
            entries[(feat, lvl)] = (k, name)
            if name is not None:
                cols.append(name)
                blocks.append((codes == k).astype(float))

    for feat in spec.numeric:
        vals = np.empty(n)
        for i, s in enumerate(subjects):
            v = s.value(feat) if s.has_feature(feat) else None
            if v is None:
                raise EncodingError(f"subject {s.id} has no value for numeric {feat!r}")
            vals[i] = float(v)
        cols.append(feat)
        blocks.append(vals)

    values = np.column_stack(blocks) if blocks else np.empty((n, 0))
    time = np.array([s.time for s in subjects], dtype=float)
    event = np.array([s.event for s in subjects], dtype=bool)
    m = DesignMatrix(tuple(cols), values, time, event, CodingDictionary(entries),
                     tuple(s.id for s in subjects), tuple(s.censoring_kind for s in subjects))
    if spec.prune:
        m, dropped = prune_collinear(m)
        if dropped:
            logger.info("pruned columns: %s", ", ".join(dropped))
    return m


def prune_collinear(m: DesignMatrix) -> tuple[DesignMatrix, list[str]]:
    """Drop constant columns, then later duplicates, then perfect death predictors.

    A perfect death predictor is a 0/1 column with at least one 1 where every
    row holding a 1 has an observed event.
    """
    X = m.values
    dropped: list[str] = []
    keep: list[int] = []
    for j in range(m.p):
        col = X[:, j]
        if m.n == 0 or np.all(col == col[0]):
            dropped.append(m.columns[j])
        else:
            keep.append(j)

    unique: list[int] = []
    seen: dict[bytes, int] = {}
    for j in keep:
        key = np.ascontiguousarray(X[:, j]).tobytes()
        if key in seen and np.array_equal(X[:, seen[key]], X[:, j]):
            dropped.append(m.columns[j])
        else:
            seen.setdefault(key, j)
            unique.append(j)

    final: list[int] = []
    for j in unique:
        col = X[:, j]
        binary = np.all((col == 0) | (col == 1))
        ones = col == 1
        if binary and ones.any() and np.all(m.event[ones]):
            dropped.append(m.columns[j])
        else:
            final.append(j)

    if len(final) == m.p:
        return m, []
    return m.drop_columns(set(m.columns) - {m.columns[j] for j in final}), dropped


def train_test_split(m: DesignMatrix, test_fraction: float, seed: int) -> tuple[DesignMatrix, DesignMatrix]:
    """Seeded row partition; the test half has round-half-up(n * fraction) rows."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    n_test = split_size(m.n, test_fraction)
    perm = np.random.default_rng(seed).permutation(m.n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return m.take(train), m.take(test)


def split_size(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 0.5))
