"""Synthetic registry-shaped cohorts with matching population and ESR tables.

Each county carries a hidden log-hazard offset (a state component plus county
noise). The same offset lowers the county's life-table ESR cells and raises
the hazard of the simulated patients living there, so the geography signal is
known exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from .data import Cohort, Subject
from .geo import ExpectedSurvivalTable, PopulationTable


class CalibrationError(RuntimeError):
    def __init__(self, achieved, target):
        self.achieved = achieved
        self.target = target
        super().__init__(f"censoring calibration failed: achieved {achieved:.4f}, target {target:.4f}")


def _default_beta():
    return {"treatment": -0.5, "stage=II": 0.4, "stage=III": 0.9, "age": 0.02}


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 10_000
    n_states: int = 5
    counties_per_state: tuple[int, int] = (3, 8)
    true_beta: dict = field(default_factory=_default_beta)
    geo_effect_scale: float = 1.0
    state_offset_sd: float = 0.5
    county_offset_sd: float = 0.25
    censoring_target: float = 0.88
    baseline: str = "exponential"
    baseline_shape: float = 1.0
    baseline_scale: float = 240.0
    admin_censor_horizon: float = 216.0
    seed: int = 0
    age_range: tuple[int, int] = (20, 89)
    age_center: float = 60.0
    years: tuple[int, int] = (2010, 2017)
    races: tuple[str, ...] = ("A", "B", "C")
    female_fraction: float = 0.9
    stage_probs: tuple[float, float, float] = (0.5, 0.3, 0.2)
    reporting_sources: tuple[str, ...] = ("hospital", "laboratory", "physician")
    time_decimals: int | None = 2
    topcoded_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.censoring_target < 1.0:
            raise ValueError("censoring_target must lie in (0, 1)")
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        lo, hi = self.counties_per_state
        if not 1 <= lo <= hi:
            raise ValueError("counties_per_state must be a range (lo, hi) with 1 <= lo <= hi")
        if self.baseline not in ("exponential", "weibull"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        for name in ("counties_per_state", "age_range", "years", "races", "stage_probs",
                     "reporting_sources"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "true_beta", dict(self.true_beta))

    @property
    def shape(self) -> float:
        return 1.0 if self.baseline == "exponential" else self.baseline_shape

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _seeds(cfg: SynthConfig):
    tables_ss, cohort_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    return tables_ss, cohort_ss


def annual_hazard(age, sex, race, year, cfg: SynthConfig):
    """General-population yearly hazard before the county multiplier (Gompertz in age)."""
    race_mult = {r: m for r, m in zip(cfg.races, np.linspace(0.85, 1.25, len(cfg.races)))}
    rm = np.vectorize(race_mult.get, otypes=[float])(race)
    sm = np.where(np.asarray(sex) == "M", 1.3, 1.0)
    return np.exp(-9.0 + 0.085 * np.asarray(age, dtype=float)) * sm * rm \
        * np.exp(-0.01 * (np.asarray(year) - cfg.years[0]))


@dataclass(frozen=True, eq=False)
class SynthTables:
    pop_frame: pd.DataFrame
    esr_frame: pd.DataFrame
    county_state: dict
    county_offsets: dict
    state_offsets: dict
    race_shares: dict

    @cached_property
    def population(self) -> PopulationTable:
        return PopulationTable.from_frame(self.pop_frame)

    @cached_property
    def esr(self) -> ExpectedSurvivalTable:
        return ExpectedSurvivalTable.from_frame(self.esr_frame)

    def county_totals(self) -> pd.Series:
        return self.pop_frame.groupby("county", sort=True)["count"].sum()

    def __iter__(self):
        # allows `pop, esr, offsets = generate_tables(cfg)`
        return iter((self.population, self.esr, self.county_offsets))


def generate_tables(cfg: SynthConfig) -> SynthTables:
    rng = np.random.default_rng(_seeds(cfg)[0])
    states = [f"S{k + 1:02d}" for k in range(cfg.n_states)]
    county_state, county_off, state_off, race_shares, sizes = {}, {}, {}, {}, {}
    lo, hi = cfg.counties_per_state
    for st in states:
        state_off[st] = float(rng.normal(0.0, cfg.state_offset_sd))
        for c in range(int(rng.integers(lo, hi + 1))):
            name = f"{st}-C{c + 1:02d}"
            county_state[name] = st
            county_off[name] = state_off[st] + float(rng.normal(0.0, cfg.county_offset_sd))
            sizes[name] = float(np.exp(rng.uniform(np.log(1e3), np.log(1e6))))
            race_shares[name] = rng.dirichlet(np.full(len(cfg.races), 2.0))

    ages = np.arange(cfg.age_range[0], cfg.age_range[1] + 1)
    years = np.arange(cfg.years[0], cfg.years[1] + 1)
    sexes = np.array(["F", "M"])
    races = np.array(cfg.races)
    counties = np.array(sorted(county_state))
    grid = np.meshgrid(np.arange(len(ages)), np.arange(2), np.arange(len(years)),
                       np.arange(len(races)), np.arange(len(counties)), indexing="ij")
    ai, si, yi, ri, ci = (g.ravel() for g in grid)
    age_share = np.exp(-0.5 * ((ages - 45.0) / 25.0) ** 2)
    age_share /= age_share.sum()
    size = np.array([sizes[c] for c in counties])
    rshare = np.array([race_shares[c] for c in counties])
    expected = size[ci] * age_share[ai] * 0.5 * rshare[ci, ri]
    counts = np.rint(expected * np.exp(rng.normal(0.0, 0.05, size=expected.size))).astype(np.int64)

    offs = np.array([county_off[c] for c in counties])
    h = annual_hazard(ages[ai], sexes[si], races[ri], years[yi], cfg)
    esr = np.exp(-h * np.exp(cfg.geo_effect_scale * offs[ci]))

    county_states = np.array([county_state[c] for c in counties])
    base = pd.DataFrame({
        "age": ages[ai], "sex": sexes[si], "year": years[yi], "race": races[ri],
        "county": counties[ci], "state": county_states[ci],
    })
    pop = base.assign(count=counts)
    esr_df = base.assign(esr=esr)
    return SynthTables(pop, esr_df, county_state, county_off, state_off,
                       {c: [float(x) for x in v] for c, v in race_shares.items()})


def _linear_predictor(cfg: SynthConfig, cols: dict) -> np.ndarray:
    n = len(cols["age"])
    eta = np.zeros(n)
    for key, b in cfg.true_beta.items():
        if key == "age":
            x = cols["age"] - cfg.age_center
        elif "=" in key:
            feat, lvl = key.split("=", 1)
            if feat not in cols:
                raise ValueError(f"true_beta refers to unknown feature {feat!r}")
            x = (cols[feat] == lvl).astype(float)
        elif key in cols:
            x = np.asarray(cols[key], dtype=float)
        else:
            raise ValueError(f"true_beta refers to unknown covariate {key!r}")
        eta += b * x
    return eta


def _calibrate(T, Ec, cfg: SynthConfig):
    """Independent exponential censoring rate hitting the censoring target."""
    H = cfg.admin_censor_horizon

    def frac(rate):
        C = np.minimum(Ec / rate, H) if rate > 0 else np.full_like(T, H)
        return float(np.mean(C < T))

    target = cfg.censoring_target
    f0 = frac(0.0)
    if f0 >= target:
        if f0 - target <= 0.02:
            return 0.0, f0
        raise CalibrationError(f0, target)
    lo, hi = -12.0, 6.0  # log10 rates
    f = f0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        f = frac(10 ** mid)
        if abs(f - target) < 0.002:
            return 10 ** mid, f
        if f < target:
            lo = mid
        else:
            hi = mid
    if abs(f - target) <= 0.02:
        return 10 ** mid, f
    raise CalibrationError(f, target)


@dataclass(frozen=True)
class SynthCohort:
    cohort: Cohort
    censoring_rate: float
    censored_fraction: float


def generate_cohort(cfg: SynthConfig, tables: SynthTables) -> SynthCohort:
    rng = np.random.default_rng(_seeds(cfg)[1])
    n = cfg.n_subjects
    totals = tables.county_totals()
    counties = totals.index.to_numpy()
    p = totals.to_numpy(dtype=float)
    county = counties[rng.choice(len(counties), size=n, p=p / p.sum())]

    ages = np.arange(cfg.age_range[0], cfg.age_range[1] + 1)
    aw = np.exp(-0.5 * ((ages - 62.0) / 12.0) ** 2)
    age = ages[rng.choice(len(ages), size=n, p=aw / aw.sum())]
    sex = np.where(rng.random(n) < cfg.female_fraction, "F", "M")
    years = np.arange(cfg.years[0], cfg.years[1] + 1)
    year = years[rng.integers(0, len(years), size=n)]
    u = rng.random(n)
    shares = np.array([tables.race_shares[c] for c in county])
    race = np.array(cfg.races)[(u[:, None] > np.cumsum(shares, axis=1)).sum(axis=1).clip(
        max=len(cfg.races) - 1)]
    treatment = (rng.random(n) < 0.5).astype(float)
    stage = np.array(["I", "II", "III"])[rng.choice(3, size=n, p=np.asarray(cfg.stage_probs))]
    source = np.array(cfg.reporting_sources)[rng.integers(0, len(cfg.reporting_sources), size=n)]
    state = np.array([tables.county_state[c] for c in county])
    offset = np.array([tables.county_offsets[c] for c in county])

    cols = {"age": age.astype(float), "sex": sex, "race": race, "treatment": treatment,
            "stage": stage, "reporting_source": source, "state": state, "year": year}
    eta = _linear_predictor(cfg, cols) + cfg.geo_effect_scale * offset
    E = rng.exponential(size=n)
    T = cfg.baseline_scale * (E * np.exp(-eta)) ** (1.0 / cfg.shape)
    Ec = rng.exponential(size=n)
    rate, _ = _calibrate(T, Ec, cfg)
    C = np.minimum(Ec / rate, cfg.admin_censor_horizon) if rate > 0 else \
        np.full(n, cfg.admin_censor_horizon)
    event = T <= C
    time = np.minimum(T, C)
    if cfg.time_decimals is not None:
        res = 10.0 ** -cfg.time_decimals
        time = np.maximum(np.round(time, cfg.time_decimals), res)
    topcoded = rng.random(n) < cfg.topcoded_fraction

    width = len(str(n))
    subjects = []
    for i in range(n):
        subjects.append(Subject(
            id=f"P{i + 1:0{width}d}",
            age=None if topcoded[i] else int(age[i]),
            age_raw="85+" if topcoded[i] else str(int(age[i])),
            sex=str(sex[i]), race=str(race[i]), diagnosis_year=int(year[i]),
            state=str(state[i]), county=str(county[i]), time=float(time[i]),
            event=bool(event[i]),
            categorical_covariates={"stage": str(stage[i]), "reporting_source": str(source[i])},
            numeric_covariates={"treatment": float(treatment[i])},
        ))
    cohort = Cohort(tuple(subjects), provenance=f"synthetic seed={cfg.seed}")
    return SynthCohort(cohort, rate, float(1.0 - event.mean()))


def truth_record(cfg: SynthConfig, tables: SynthTables, sc: SynthCohort) -> dict:
    return {
        "config": cfg.to_dict(),
        "true_beta": dict(cfg.true_beta),
        "geo_effect_scale": cfg.geo_effect_scale,
        "state_offsets": tables.state_offsets,
        "county_offsets": tables.county_offsets,
        "county_state": tables.county_state,
        "censoring_rate": sc.censoring_rate,
        "censored_fraction": sc.censored_fraction,
        "n_subjects": len(sc.cohort),
    }

