import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geosurv.data import (CleaningRules, Cohort, CohortSchema, DesignMatrix, EncodingError,
                          EncodingSpec, RowParseError, SchemaError, Subject, clean_cohort,
                          encode_covariates, load_cohort, prune_collinear, split_size,
                          train_test_split, write_cohort)

SCHEMA = {"id": "pid", "age": "age", "sex": "sex", "race": "race", "diagnosis_year": "year",
          "state": "state", "time": "months", "event": "dead", "categorical": ["grade"],
          "numeric": ["size"]}


def write_csv(path, rows, header="pid,age,sex,race,year,state,grade,size,months,dead"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path


def subj(i, age=50, year=2005, grade="G1", event=False, time=10.0, state="KY", **extra):
    return Subject(id=str(i), age=age, sex="F", race="W", diagnosis_year=year, state=state,
                   county=None, time=time, event=event,
                   categorical_covariates={"grade": grade, **extra.get("cats", {})},
                   numeric_covariates=extra.get("nums", {}), age_raw=str(age))


def test_load_three_rows(tmp_path):
    p = write_csv(tmp_path / "c.csv", ["a,50,F,W,2005,KY,G1,1.5,10,1",
                                       "b,61,F,B,2006,KY,G2,2.0,20.5,0",
                                       "c,70,M,W,2007,IA,G1,,3,yes"])
    c = load_cohort(p, SCHEMA)
    assert len(c) == 3
    assert [s.id for s in c] == ["a", "b", "c"]
    assert c.subjects[2].event is True and c.subjects[1].event is False
    assert c.subjects[2].numeric_covariates["size"] is None
    assert c.subjects[1].time == 20.5


def test_topcoded_age_survives_loading(tmp_path):
    p = write_csv(tmp_path / "c.csv", ["a,85+,F,W,2005,KY,G1,1,10,1", "b,60,F,W,2005,KY,G1,1,10,0"])
    c = load_cohort(p, SCHEMA)
    assert len(c) == 2
    assert c.subjects[0].age is None and c.subjects[0].age_raw == "85+"


def test_missing_event_column_is_schema_error(tmp_path):
    p = write_csv(tmp_path / "c.csv", ["a,50,F,W,2005,KY,G1,1,10"],
                  header="pid,age,sex,race,year,state,grade,size,months")
    with pytest.raises(SchemaError, match="event"):
        load_cohort(p, SCHEMA)


def test_schema_without_required_role():
    bad = {k: v for k, v in SCHEMA.items() if k != "event"}
    with pytest.raises(SchemaError, match="event"):
        CohortSchema.from_dict(bad)


def test_bad_rows_reported_with_numbers(tmp_path):
    p = write_csv(tmp_path / "c.csv", ["a,50,F,W,2005,KY,G1,1,10,1",
                                       "b,50,F,W,2005,KY,G1,1,ten,1",
                                       "c,50,F,W,2005,KY,G1,1,10,maybe"])
    with pytest.raises(RowParseError) as info:
        load_cohort(p, SCHEMA)
    assert [r for r, _ in info.value.errors] == [3, 4]
    assert len(load_cohort(p, SCHEMA, skip_bad_rows=True)) == 1


def test_clean_drops_topcoded_ages():
    subjects = [subj(i) for i in range(8)]
    subjects += [Subject(id=f"old{i}", age=None, age_raw="85+", sex="F", race="W",
                         diagnosis_year=2005, state="KY", county=None, time=3.0, event=True,
                         categorical_covariates={"grade": "G1"}) for i in range(2)]
    out, report = clean_cohort(Cohort(tuple(subjects)))
    assert len(out) == 8
    assert len(report.dropped_rows) == 2
    assert all("85+" in why for _, why in report.dropped_rows)


def test_clean_drops_era_sparse_feature():
    subjects = [subj(i, year=2004 + i % 10, cats={"subtype": "HR+" if 2004 + i % 10 >= 2010 else None})
                for i in range(20)]
    out, report = clean_cohort(Cohort(tuple(subjects)), CleaningRules(required=("grade", "subtype")))
    assert len(out) == 20
    assert all("subtype" not in s.categorical_covariates for s in out)
    assert report.dropped_features == (("subtype", "recorded only from 2010 on"),)


def test_clean_fixed_point():
    c = Cohort(tuple(subj(i) for i in range(5)))
    out, report = clean_cohort(c, CleaningRules(required=("grade",)))
    assert out == c
    assert not report


@given(st.lists(st.tuples(st.sampled_from([None, 40, 55, 70]),
                          st.sampled_from([None, "G1", "G2"]),
                          st.integers(2000, 2005)), min_size=1, max_size=25))
def test_clean_is_idempotent(rows):
    subjects = []
    for i, (age, grade, year) in enumerate(rows):
        subjects.append(Subject(id=str(i), age=age, age_raw="85+" if age is None else str(age),
                                sex="F", race="W", diagnosis_year=year, state="KY", county=None,
                                time=1.0, event=False, categorical_covariates={"grade": grade}))
    rules = CleaningRules(required=("grade",))
    once, _ = clean_cohort(Cohort(tuple(subjects)), rules)
    twice, report = clean_cohort(once, rules)
    assert twice == once
    assert not report


def test_one_hot_three_levels():
    c = Cohort(tuple(subj(i, grade=g, event=(i % 2 == 0)) for i, g in enumerate("AABC")))
    m = encode_covariates(c, EncodingSpec(categorical=("grade",), prune=False))
    assert m.columns == ("grade=B", "grade=C")
    np.testing.assert_array_equal(m.column("grade=B"), [0, 0, 1, 0])
    np.testing.assert_array_equal(m.column("grade=C"), [0, 0, 0, 1])
    assert m.coding.entries[("grade", "A")] == (0, None)
    assert m.coding.decode("grade", {"grade=B": 0, "grade=C": 0}) == "A"


def test_single_level_feature_emits_nothing():
    c = Cohort(tuple(subj(i, grade="G1") for i in range(4)))
    m = encode_covariates(c, EncodingSpec(categorical=("grade",)))
    assert m.p == 0


def test_frozen_levels_reject_unseen():
    c = Cohort(tuple(subj(i, grade=g) for i, g in enumerate("ABZ")))
    with pytest.raises(EncodingError, match="grade.*Z"):
        encode_covariates(c, EncodingSpec(categorical=("grade",),
                                          frozen_levels={"grade": ("A", "B")}))


levels = st.sampled_from(["a", "b", "c", "d"])


@given(st.lists(st.tuples(levels, levels), min_size=2, max_size=30))
def test_encoding_round_trip_and_column_count(rows):
    c = Cohort(tuple(subj(i, grade=g, cats={"site": s}) for i, (g, s) in enumerate(rows)))
    m = encode_covariates(c, EncodingSpec(categorical=("grade", "site"), prune=False))
    k = len({g for g, _ in rows}) + len({s for _, s in rows})
    assert m.p == k - 2
    for i, (g, s) in enumerate(rows):
        row = dict(zip(m.columns, m.values[i]))
        assert m.coding.decode("grade", row) == g
        assert m.coding.decode("site", row) == s


def test_prune_constant_column():
    m = DesignMatrix(("z", "x"), np.array([[0, 1], [0, 2], [0, 3.0]]), [1, 2, 3], [1, 0, 1])
    out, dropped = prune_collinear(m)
    assert dropped == ["z"] and out.columns == ("x",)


def test_prune_perfect_death_predictor():
    event = np.array([1, 0, 1, 0, 0], bool)
    X = np.column_stack([event.astype(float), [1, 2, 3, 4, 5.0]])
    out, dropped = prune_collinear(DesignMatrix(("advanced", "x"), X, np.arange(5.0), event))
    assert dropped == ["advanced"]


def test_prune_duplicate_keeps_first():
    X = np.array([[1, 1, 0], [0, 0, 1], [1, 1, 1], [0, 0, 0.0]])
    m = DesignMatrix(("a", "b", "c"), X, np.arange(4.0), [0, 0, 1, 1])
    out, dropped = prune_collinear(m)
    # duplicate scan oracle: pairwise comparison of all column pairs
    dupes = [m.columns[j] for j in range(3) for i in range(j) if np.array_equal(X[:, i], X[:, j])]
    assert dupes == ["b"] and dropped == ["b"] and out.columns == ("a", "c")


def _matrix(n, seed=0):
    r = np.random.default_rng(seed)
    return DesignMatrix(("x",), r.normal(size=(n, 1)), r.exponential(size=n), r.random(n) < 0.5)


def test_split_fraction_zero():
    train, test = train_test_split(_matrix(10), 0.0, 3)
    assert test.n == 0 and train.n == 10


def test_split_deterministic():
    m = _matrix(10)
    a = train_test_split(m, 0.2, 101)
    b = train_test_split(m, 0.2, 101)
    assert a[1].row_ids == b[1].row_ids and a[0].row_ids == b[0].row_ids


def test_split_size_table_one_overall():
    assert split_size(1_008_976, 0.2) == 201_795


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        train_test_split(_matrix(4), 1.5, 0)


@given(st.integers(1, 60), st.floats(0, 1), st.integers(0, 2**31))
def test_split_partition(n, frac, seed):
    m = _matrix(n)
    train, test = train_test_split(m, frac, seed)
    assert test.n == split_size(n, frac)
    assert set(train.row_ids).isdisjoint(test.row_ids)
    assert set(train.row_ids) | set(test.row_ids) == set(m.row_ids)
    assert train.columns == test.columns == m.columns


def test_write_and_reload_round_trip(tmp_path):
    c = Cohort(tuple(subj(i, nums={"state_esr": 0.1 + i / 7}) for i in range(4)))
    schema = write_cohort(c, tmp_path / "c.csv")
    back = load_cohort(tmp_path / "c.csv", schema)
    assert [s.numeric_covariates["state_esr"] for s in back] == \
        [s.numeric_covariates["state_esr"] for s in c]


def test_coding_dictionary_json(tmp_path):
    c = Cohort(tuple(subj(i, grade=g) for i, g in enumerate("BAC")))
    m = encode_covariates(c, EncodingSpec(categorical=("grade",), prune=False))
    m.coding.write_json(tmp_path / "codes.json")
    assert json.loads((tmp_path / "codes.json").read_text()) == {"grade": {"A": 0, "B": 1, "C": 2}}


def test_cleaning_report_csv(tmp_path):
    subjects = (subj(1), Subject(id="x", age=None, age_raw="85+", sex="F", race="W",
                                 diagnosis_year=2005, state="KY", county=None, time=1, event=False))
    _, report = clean_cohort(Cohort(subjects))
    report.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["row_id,reason", "x,top-coded age '85+'"]


def test_subject_invariants():
    with pytest.raises(ValueError):
        subj(1, time=-1.0)
    with pytest.raises(ValueError):
        Subject(id="1", age=50, sex="F", race="W", diagnosis_year=2000, state="KY", county=None,
                time=1.0, event=True, censoring_kind="interval")
    with pytest.raises(ValueError, match="duplicate"):
        Cohort((subj(1), subj(1)))
