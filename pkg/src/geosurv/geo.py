"""State-level expected survival rate from county life tables.

A patient's county is usually masked, so the county ESR cells of their
state are averaged with weights equal to the share of the general
population with the same (age, sex, year, race) profile living in each
county.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, NamedTuple

import pandas as pd

from .data import Cohort, Subject

logger = logging.getLogger(__name__)

POP_COLUMNS = ("age", "sex", "year", "race", "county", "state", "count")
ESR_COLUMNS = ("age", "sex", "year", "race", "county", "state", "esr")


class Profile(NamedTuple):
    age: int
    sex: str
    year: int
    race: str


class TableFormatError(ValueError):
    pass


class NoPopulationData(LookupError):
    def __init__(self, profile, state):
        self.profile = profile
        self.state = state
        super().__init__(f"no population for profile {tuple(profile)} in state {state!r}")


class AllEsrCellsMissing(LookupError):
    def __init__(self, profile, state):
        self.profile = profile
        self.state = state
        super().__init__(f"no ESR cell for any county of {state!r}, profile {tuple(profile)}")


class AttachError(RuntimeError):
    def __init__(self, report):
        self.report = report
        bad = [r for r in report if r.status != "ok"]
        super().__init__(f"state_esr failed for {len(bad)} subject(s); first: "
                         f"{bad[0].subject_id}: {bad[0].detail}" if bad else "state_esr failed")


def _profile_key(age, sex, year, race) -> Profile:
    return Profile(int(age), str(sex), int(year), str(race))


def _check_county_states(pairs, source: str) -> dict[str, str]:
    owner: dict[str, str] = {}
    clashes = set()
    for county, state in pairs:
        prev = owner.setdefault(county, state)
        if prev != state:
            clashes.add((county, prev, state))
    if clashes:
        msg = ", ".join(f"{c} in {a} and {b}" for c, a, b in sorted(clashes)[:5])
        raise TableFormatError(f"{source}: county assigned to more than one state: {msg}")
    return owner


class PopulationTable:
    """Counts keyed by (profile, state) -> {county: count}."""

    def __init__(self, entries: Mapping[tuple, int]):
        by: dict[tuple[Profile, str], dict[str, int]] = defaultdict(dict)
        pairs = []
        for (age, sex, year, race, county, state), count in entries.items():
            if count < 0 or int(count) != count:
                raise TableFormatError(f"population count must be a non-negative integer: {count}")
            key = (_profile_key(age, sex, year, race), str(state))
            by[key][str(county)] = by[key].get(str(county), 0) + int(count)
            pairs.append((str(county), str(state)))
        self.county_state = _check_county_states(pairs, "population table")
        self._cells = dict(by)

    def counts(self, profile: Profile, state: str) -> dict[str, int]:
        return self._cells.get((_profile_key(*profile), str(state)), {})

    @property
    def states(self) -> set[str]:
        return set(self.county_state.values())

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "PopulationTable":
        _require(df, POP_COLUMNS, "population table")
        keys = zip(df["age"], df["sex"], df["year"], df["race"], df["county"], df["state"])
        entries: dict[tuple, int] = {}
        for k, v in zip(keys, df["count"]):
            k = (int(k[0]), str(k[1]), int(k[2]), str(k[3]), str(k[4]), str(k[5]))
            entries[k] = entries.get(k, 0) + int(v)
        return cls(entries)

    @classmethod
    def read_csv(cls, path) -> "PopulationTable":
        return cls.from_frame(_read_table(path, POP_COLUMNS, {"count": "int64"}))


class ExpectedSurvivalTable:
    """ESR cells keyed by (age, sex, year, race, county, state)."""

    def __init__(self, entries: Mapping[tuple, float]):
        cells: dict[tuple[Profile, str, str], float] = {}
        ages: dict[tuple, list[int]] = defaultdict(list)
        pairs = []
        for (age, sex, year, race, county, state), esr in entries.items():
            esr = float(esr)
            if not 0.0 <= esr <= 1.0:
                raise TableFormatError(f"esr must lie in [0, 1], got {esr}")
            prof = _profile_key(age, sex, year, race)
            cells[(prof, str(county), str(state))] = esr
            ages[(prof.sex, prof.year, prof.race, str(county), str(state))].append(prof.age)
            pairs.append((str(county), str(state)))
        self.county_state = _check_county_states(pairs, "ESR table")
        self._cells = cells
        self._ages = {k: sorted(v) for k, v in ages.items()}

    def get(self, profile: Profile, county: str, state: str) -> float | None:
        return self._cells.get((_profile_key(*profile), str(county), str(state)))

    def nearest_age(self, profile: Profile, county: str, state: str) -> float | None:
        """ESR for the closest available age in the same county; ties go to the younger age."""
        prof = _profile_key(*profile)
        ages = self._ages.get((prof.sex, prof.year, prof.race, str(county), str(state)))
        if not ages:
            return None
        best = min(ages, key=lambda a: (abs(a - prof.age), a))
        return self._cells[(prof._replace(age=best), str(county), str(state))]

    def __iter__(self):
        for (prof, county, state), v in self._cells.items():
            yield (prof, county, state), v

    @property
    def states(self) -> set[str]:
        return set(self.county_state.values())

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "ExpectedSurvivalTable":
        _require(df, ESR_COLUMNS, "ESR table")
        keys = zip(df["age"], df["sex"], df["year"], df["race"], df["county"], df["state"])
        return cls({(int(a), str(s), int(y), str(r), str(c), str(st)): float(v)
                    for (a, s, y, r, c, st), v in zip(keys, df["esr"])})

    @classmethod
    def read_csv(cls, path) -> "ExpectedSurvivalTable":
        return cls.from_frame(_read_table(path, ESR_COLUMNS, {"esr": "float64"}))


def _require(df, cols, what):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise TableFormatError(f"{what}: missing column(s) {', '.join(missing)}")


def _read_table(path, cols, numeric) -> pd.DataFrame:
    dtypes = {c: str for c in ("sex", "race", "county", "state")}
    df = pd.read_csv(path, dtype=dtypes, keep_default_na=False)
    _require(df, cols, str(path))
    for c in ("age", "year", *numeric):
        conv = pd.to_numeric(df[c], errors="coerce")
        bad = conv.isna()
        if bad.any():
            line = int(bad.to_numpy().argmax()) + 2
            raise TableFormatError(f"{path}: line {line}: column {c!r} is not numeric: "
                                   f"{df[c].iloc[line - 2]!r}")
        df[c] = conv
    return df


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateEsrResult:
    value: float
    counties_used: int
    total_weight: float
    fallback_applied: bool


@dataclass(frozen=True)
class FallbackPolicy:
    """How to handle counties with population but no ESR cell, and failing subjects.

    missing_esr: "renormalize" (drop those counties, rescale the rest) or
    "nearest_age" (use the same county's closest-age cell, renormalizing if
    even that is absent). on_failure: "drop" or "abort".
    """

    missing_esr: str = "renormalize"
    on_failure: str = "drop"

    def __post_init__(self):
        if self.missing_esr not in ("renormalize", "nearest_age"):
            raise ValueError(f"unknown missing_esr policy {self.missing_esr!r}")
        if self.on_failure not in ("drop", "abort"):
            raise ValueError(f"unknown on_failure policy {self.on_failure!r}")


def county_weights(pop: PopulationTable, profile, state: str) -> dict[str, float]:
    counts = pop.counts(profile, state)
    total = math.fsum(counts.values())
    if total <= 0:
        raise NoPopulationData(tuple(profile), state)
    return {c: counts[c] / total for c in sorted(counts) if counts[c] > 0}


def state_esr(esr: ExpectedSurvivalTable, pop: PopulationTable, profile, state: str,
              policy: FallbackPolicy = FallbackPolicy()) -> StateEsrResult:
    """Population-weighted average of county ESR cells within ``state``."""
    weights = county_weights(pop, profile, state)
    used: list[tuple[float, float]] = []
    fallback = False
    for county, w in weights.items():
        v = esr.get(profile, county, state)
        if v is None and policy.missing_esr == "nearest_age":
            v = esr.nearest_age(profile, county, state)
        if v is None:
            fallback = True
            continue
        if esr.get(profile, county, state) is None:
            fallback = True
        used.append((w, v))
    if not used:
        raise AllEsrCellsMissing(tuple(profile), state)
    total = math.fsum(w for w, _ in used)
    value = math.fsum(w * v for w, v in used) / total
    lo = min(v for _, v in used)
    hi = max(v for _, v in used)
    # rounding can push a weighted mean an ulp outside its own range
    value = min(max(value, lo), hi)
    return StateEsrResult(value, len(used), total, fallback)


@dataclass(frozen=True)
class AttachRecord:
    subject_id: str
    status: str
    detail: str


def write_attach_report(report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "status", "detail"])
        for r in report:
            w.writerow([r.subject_id, r.status, r.detail])


def _subject_profile(s: Subject) -> Profile:
    missing = [f for f in ("age", "sex", "diagnosis_year", "race") if getattr(s, f) in (None, "")]
    if missing:
        raise ValueError(f"missing {', '.join(missing)}")
    return _profile_key(s.age, s.sex, s.diagnosis_year, s.race)


def _attach_state(subjects, esr, pop, policy, name):
    memo: dict[Profile, StateEsrResult | Exception] = {}
    out = []
    for s in subjects:
        try:
            prof = _subject_profile(s)
        except ValueError as exc:
            out.append((s, None, AttachRecord(s.id, "failed", str(exc))))
            continue
        res = memo.get(prof)
        if res is None:
            try:
                res = state_esr(esr, pop, prof, s.state, policy)
            except (NoPopulationData, AllEsrCellsMissing) as exc:
                res = exc
            memo[prof] = res
        if isinstance(res, Exception):
            out.append((s, None, AttachRecord(s.id, "failed", str(res))))
        else:
            nums = {**s.numeric_covariates, name: res.value}
            status = "fallback" if res.fallback_applied else "ok"
            detail = f"counties={res.counties_used}"
            out.append((s, replace(s, numeric_covariates=nums), AttachRecord(s.id, status, detail)))
    return out


def attach_state_esr(c: Cohort, esr: ExpectedSurvivalTable, pop: PopulationTable,
                     policy: FallbackPolicy = FallbackPolicy(), jobs: int = 1,
                     name: str = "state_esr") -> tuple[Cohort, list[AttachRecord]]:
    """Add a ``state_esr`` numeric covariate to every subject.

    Subjects are processed per state (optionally on ``jobs`` threads, each with
    its own memo); output order follows the input cohort. Failing subjects are
    dropped or abort the run depending on ``policy.on_failure``.
    """
    by_state: dict[str, list[Subject]] = defaultdict(list)
    for s in c:
        by_state[s.state].append(s)
    states = sorted(by_state)
    if jobs > 1 and len(states) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda st: _attach_state(by_state[st], esr, pop, policy, name), states))
    else:
        parts = [_attach_state(by_state[st], esr, pop, policy, name) for st in states]
    result = {s.id: (new, rec) for part in parts for s, new, rec in part}

    subjects, report = [], []
    for s in c:
        new, rec = result[s.id]
        report.append(rec)
        if new is not None:
            subjects.append(new)
    failures = sum(r.status == "failed" for r in report)
    if failures:
        logger.warning("state_esr unavailable for %d of %d subjects", failures, len(c))
        if policy.on_failure == "abort":
            raise AttachError(report)
    return Cohort(tuple(subjects), c.provenance), report


def check_state_codes(c: Cohort, esr: ExpectedSurvivalTable, pop: PopulationTable) -> list[str]:
    """States in the cohort that one of the tables does not cover, plus county clashes."""
    problems = []
    for st in c.states:
        where = [n for n, t in (("population", pop), ("esr", esr)) if st not in t.states]
        if where:
            problems.append(f"state {st!r} absent from {' and '.join(where)} table")
    for county, st in pop.county_state.items():
        other = esr.county_state.get(county)
        if other is not None and other != st:
            problems.append(f"county {county!r} is in {st!r} (population) but {other!r} (esr)")
    return problems
