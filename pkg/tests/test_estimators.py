import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geosurv.data import DesignMatrix
from geosurv.estimators import (CensoringError, ConvergenceWarning, CoxModel, SingularHessianError,
                                breslow_baseline, cox_fit, cox_partial_loglik, cox_survival,
                                kaplan_meier, weibull_ph_fit)
from conftest import exp_two_group


def naive_loglik(beta, X, time, event, ties):
    """Direct per-event-time evaluation of the partial likelihood."""
    eta = X @ beta
    total = 0.0
    for u in np.unique(time[event]):
        D = np.flatnonzero(event & (time == u))
        R = np.flatnonzero(time >= u)
        risk = sum(math.exp(eta[j]) for j in R)
        tied = sum(math.exp(eta[j]) for j in D)
        for l in range(len(D)):
            frac = l / len(D) if ties == "efron" else 0.0
            total += eta[D[l]] - math.log(risk - frac * tied)
    return total


def fixture(seed, n=30, p=3, tied=False):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, p))
    t = r.exponential(size=n)
    if tied:
        t = np.ceil(t * 4) / 4
    e = r.random(n) < 0.7
    e[0] = True
    return X, t, e


def mat(X, t, e):
    return DesignMatrix(tuple(f"x{j}" for j in range(X.shape[1])), X, t, e)


# Kaplan-Meier --------------------------------------------------------------

def test_km_hand_fixture():
    # times 1,2,2,3,4,5 with events 1,1,0,1,0,1
    km = kaplan_meier([1, 2, 2, 3, 4, 5], [1, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(km.event_times, [1, 2, 3, 5])
    np.testing.assert_array_equal(km.at_risk, [6, 5, 3, 1])
    s1 = 1 - 1 / 6
    s2 = s1 * (1 - 1 / 5)
    s3 = s2 * (1 - 1 / 3)
    exact = [Fraction(5, 6), Fraction(2, 3), Fraction(4, 9), Fraction(0)]
    for got, want in zip(km.survival, exact):
        assert Fraction(got) == pytest.approx(want, abs=1e-15)
    assert km(0.5) == 1.0
    assert km(1) == s1
    assert km(2.5) == s2
    assert km(4.9) == s3
    assert km(5) == 0.0


def test_km_censored_at_event_time_stays_at_risk():
    km = kaplan_meier([2, 2, 3], [1, 0, 1])
    assert km.at_risk[0] == 3
    assert km(2) == 1 - 1 / 3


def test_km_all_censored():
    km = kaplan_meier([1, 2], [0, 0])
    assert km(10) == 1.0


@given(st.lists(st.integers(0, 20), min_size=1, max_size=40))
def test_km_without_censoring_is_one_minus_ecdf(ts):
    ts = np.array(ts, float)
    km = kaplan_meier(ts, np.ones(ts.size, bool))
    for u in np.unique(np.concatenate([ts, ts + 0.5])):
        assert km(u) == pytest.approx(1 - np.mean(ts <= u), abs=1e-12)


# Partial likelihood ------------------------------------------------------

def test_null_loglik_is_minus_sum_log_risk_set():
    X, t, e = fixture(1)
    ll = cox_partial_loglik(np.zeros(3), mat(X, t, e), ties="breslow")[0]
    want = -sum(math.log(np.sum(t >= ti)) for ti in t[e])
    assert ll == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("ties", ["efron", "breslow"])
@pytest.mark.parametrize("seed", range(4))
def test_loglik_matches_naive(ties, seed):
    X, t, e = fixture(seed, tied=True)
    beta = np.random.default_rng(seed).normal(scale=0.5, size=3)
    ll = cox_partial_loglik(beta, mat(X, t, e), ties=ties)[0]
    assert ll == pytest.approx(naive_loglik(beta, X, t, e, ties), rel=1e-10)


def test_efron_equals_breslow_without_ties():
    X, t, e = fixture(3)
    beta = np.array([0.3, -0.2, 0.1])
    a = cox_partial_loglik(beta, mat(X, t, e), "efron")
    b = cox_partial_loglik(beta, mat(X, t, e), "breslow")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12)


def fd_check(seed, tied, ties, h=1e-5):
    X, t, e = fixture(seed, tied=tied)
    m = mat(X, t, e)
    r = np.random.default_rng(100 + seed)
    worst = 0.0
    for _ in range(10):
        beta = r.normal(scale=0.5, size=3)
        _, g, H = cox_partial_loglik(beta, m, ties)
        g_fd = np.zeros(3)
        H_fd = np.zeros((3, 3))
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            g_fd[j] = (cox_partial_loglik(beta + step, m, ties)[0]
                       - cox_partial_loglik(beta - step, m, ties)[0]) / (2 * h)
            H_fd[:, j] = (cox_partial_loglik(beta + step, m, ties)[1]
                          - cox_partial_loglik(beta - step, m, ties)[1]) / (2 * h)
        worst = max(worst, np.linalg.norm(g - g_fd) / max(np.linalg.norm(g), 1.0),
                    np.linalg.norm(H - H_fd) / max(np.linalg.norm(H), 1.0))
    return worst


@pytest.mark.parametrize("ties", ["efron", "breslow"])
@pytest.mark.parametrize("tied", [False, True])
def test_gradient_and_hessian_finite_differences(ties, tied):
    assert fd_check(7, tied, ties) < 1e-6


def test_penalized_gradient():
    X, t, e = fixture(2)
    beta = np.array([0.5, -1.0, 0.2])
    v0, g0, H0 = cox_partial_loglik(beta, mat(X, t, e))
    v, g, H = cox_partial_loglik(beta, mat(X, t, e), penalizer=2.0)
    assert v == pytest.approx(v0 - beta @ beta)
    np.testing.assert_allclose(g, g0 - 2 * beta)
    np.testing.assert_allclose(H, H0 - 2 * np.eye(3))


# Fitting ----------------------------------------------------------------

def test_recovers_log_two():
    x, t, e = exp_two_group(5000, 2.0, 0.2, seed=11)
    fit = cox_fit(DesignMatrix(("x",), x[:, None], t, e))
    assert fit.converged
    assert abs(fit.beta[0] - math.log(2)) < 0.1


def test_null_effect():
    x, t, e = exp_two_group(5000, 1.0, 0.2, seed=12)
    fit = cox_fit(DesignMatrix(("x",), x[:, None], t, e))
    assert abs(fit.beta[0]) < 0.05


def test_loglik_trace_monotone():
    X, t, e = fixture(5, n=200)
    fit = cox_fit(mat(X, t, e))
    assert all(b >= a for a, b in zip(fit.loglik_trace, fit.loglik_trace[1:]))


def test_huge_penalizer_shrinks_to_zero():
    X, t, e = fixture(5, n=200)
    fit = cox_fit(mat(X, t, e), penalizer=1e6)
    assert np.all(np.abs(fit.beta) < 1e-4)


def test_row_order_invariance():
    X, t, e = fixture(6, n=120, tied=True)
    a = cox_fit(mat(X, t, e))
    perm = np.random.default_rng(0).permutation(len(t))
    b = cox_fit(mat(X[perm], t[perm], e[perm]))
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)


def test_translation_invariance_of_beta():
    X, t, e = fixture(8, n=150)
    a = cox_fit(mat(X, t, e), standardize=False)
    b = cox_fit(mat(X + 5.0, t, e), standardize=False)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)


def test_collinear_columns_named():
    X, t, e = fixture(9, n=80)
    X = np.column_stack([X, X[:, 0] + X[:, 1]])
    with pytest.raises(SingularHessianError) as info:
        cox_fit(mat(X, t, e), standardize=False)
    assert {"x0", "x1", "x3"} <= set(info.value.columns)


def test_constant_column_zero_with_warning():
    X, t, e = fixture(9, n=80)
    X[:, 1] = 3.0
    with pytest.warns(ConvergenceWarning, match="x1"):
        fit = cox_fit(mat(X, t, e))
    assert fit.beta[1] == 0.0


def test_interval_censoring_rejected():
    X, t, e = fixture(1)
    m = DesignMatrix(("a", "b", "c"), X, t, e, censoring=("interval",) + ("right",) * (len(t) - 1))
    with pytest.raises(CensoringError):
        cox_fit(m)


def test_breslow_baseline_matches_km_on_null():
    r = np.random.default_rng(4)
    t = r.exponential(size=3000)
    c = r.exponential(2.0, size=3000)
    time, event = np.minimum(t, c), t <= c
    _, H = breslow_baseline(np.zeros((3000, 0)), time, event, np.zeros(0))
    km = kaplan_meier(time, event)
    assert np.max(np.abs(np.exp(-H) - km.survival)) < 0.05


def test_survival_and_json_round_trip(tmp_path):
    X, t, e = fixture(10, n=100)
    fit = cox_fit(mat(X, t, e))
    s = cox_survival(fit, X[0], [0.0, 0.5, 100.0])
    assert s[0] == 1.0 and 0 < s[1] < 1 and s[2] == pytest.approx(
        math.exp(-fit.cumulative_hazard(100.0) * math.exp(fit.beta @ X[0])))
    fit.write_json(tmp_path / "m.json")
    back = CoxModel.from_json_dict(json.loads((tmp_path / "m.json").read_text()))
    np.testing.assert_array_equal(back.beta, fit.beta)
    np.testing.assert_allclose(cox_survival(back, X[1], 0.7), cox_survival(fit, X[1], 0.7))
    with pytest.raises(ValueError):
        cox_survival(fit, X[0], -1.0)


def test_coefficients_csv_sorted(tmp_path):
    X, t, e = fixture(11, n=200)
    X[:, 2] *= 0.01
    fit = cox_fit(mat(X, t, e))
    fit.write_coefficients(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "name,beta,abs_beta"
    vals = [float(r.split(",")[2]) for r in rows[1:]]
    assert vals == sorted(vals, reverse=True)


# Weibull -----------------------------------------------------------------

def test_weibull_recovery():
    r = np.random.default_rng(21)
    n, k, lam, b = 5000, 1.5, 10.0, 0.7
    x = r.normal(size=n)
    # S(t|x) = exp(-(t/lam)^k e^{b x})  =>  T = lam * (E e^{-b x})^{1/k}
    T = lam * (r.exponential(size=n) * np.exp(-b * x)) ** (1 / k)
    C = r.uniform(0, 40, size=n)
    fit = weibull_ph_fit(DesignMatrix(("x",), x[:, None], np.minimum(T, C), T <= C))
    assert fit.converged
    assert abs(fit.shape / k - 1) < 0.1
    assert abs(fit.scale / lam - 1) < 0.1
    assert abs(fit.beta[0] / b - 1) < 0.1
