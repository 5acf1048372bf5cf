"""Kaplan-Meier, Cox proportional hazards and Weibull PH estimators.

All estimators take right-censored data only. Cox fitting maximizes the
(optionally ridge penalized) partial likelihood with Newton-Raphson and
step halving on internally standardized covariates; coefficients are
reported on the original scale.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import DesignMatrix

logger = logging.getLogger(__name__)

TIE_RULES = ("efron", "breslow")


class ConvergenceWarning(UserWarning):
    pass


class SingularHessianError(np.linalg.LinAlgError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("Hessian is singular; offending column(s): " + ", ".join(self.columns))


class CensoringError(ValueError):
    """Raised for left- or interval-censored input."""


# ---------------------------------------------------------------------------
# Kaplan-Meier

@dataclass(frozen=True)
class KaplanMeierCurve:
    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events_at: np.ndarray

    def __call__(self, t):
        """Survival at time(s) ``t`` (right-continuous step function)."""
        idx = np.searchsorted(self.event_times, np.asarray(t, dtype=float), side="right")
        s = np.concatenate([[1.0], self.survival])
        return s[idx]


def kaplan_meier(time, event) -> KaplanMeierCurve:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    if time.size == 0:
        raise ValueError("kaplan_meier needs at least one subject")
    if time.shape != event.shape:
        raise ValueError("time and event lengths differ")
    if np.any(time < 0):
        raise ValueError("times must be non-negative")
    uniq = np.unique(time[event])
    # subjects censored at t are still at risk for events at t
    at_risk = len(time) - np.searchsorted(np.sort(time), uniq, side="left")
    d = np.bincount(np.searchsorted(uniq, time[event]), minlength=uniq.size)
    surv = np.cumprod(1.0 - d / at_risk)
    return KaplanMeierCurve(uniq, surv, at_risk.astype(int), d.astype(int))


# ---------------------------------------------------------------------------
# Cox partial likelihood

class _RiskSets:
    """Time-sorted layout shared by every likelihood evaluation on one dataset."""

    def __init__(self, X, time, event, ties):
        if ties not in TIE_RULES:
            raise ValueError(f"unknown tie rule {ties!r}")
        order = np.argsort(time, kind="mergesort")
        self.X = X[order]
        self.time = time[order]
        self.event = event[order]
        if not self.event.any():
            raise ValueError("partial likelihood undefined: no events")
        ev_times = np.unique(self.time[self.event])
        self.uniq = ev_times
        # first sorted row with time >= each event time: start of its risk set
        self.start = np.searchsorted(self.time, ev_times, side="left")
        gid = np.searchsorted(ev_times, self.time[self.event])
        self.ev_rows = np.flatnonzero(self.event)
        self.ev_group = gid
        self.d = np.bincount(gid, minlength=ev_times.size)
        # expand each tied group of size d into d Efron terms l = 0..d-1
        self.term_group = np.repeat(np.arange(ev_times.size), self.d)
        if ties == "efron":
            offsets = np.concatenate([[0], np.cumsum(self.d)[:-1]])
            l = np.arange(self.term_group.size) - np.repeat(offsets, self.d)
            self.frac = l / self.d[self.term_group]
        else:
            self.frac = np.zeros(self.term_group.size)


def _reverse_cumsum(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def _loglik(rs: _RiskSets, beta, penalizer=0.0, need_hess=True):
    X = rs.X
    eta = X @ beta
    # shift for overflow safety; the partial likelihood is invariant to it
    shift = eta.max()
    w = np.exp(eta - shift)
    S0 = _reverse_cumsum(w)[rs.start]
    S1 = _reverse_cumsum(w[:, None] * X)[rs.start]
    wd = np.bincount(rs.ev_group, weights=w[rs.ev_rows], minlength=rs.uniq.size)
    Xd = np.zeros_like(S1)
    np.add.at(Xd, rs.ev_group, w[rs.ev_rows, None] * X[rs.ev_rows])
    g, f = rs.term_group, rs.frac[:, None]
    phi = S0[g] - rs.frac * wd[g]
    a = (S1[g] - f * Xd[g]) / phi[:, None]

    value = eta[rs.ev_rows].sum() - np.log(phi).sum() - shift * g.size
    grad = X[rs.ev_rows].sum(axis=0) - a.sum(axis=0)
    hess = None
    if need_hess:
        outer = w[:, None, None] * X[:, :, None] * X[:, None, :]
        S2 = _reverse_cumsum(outer)[rs.start]
        X2d = np.zeros_like(S2)
        np.add.at(X2d, rs.ev_group, outer[rs.ev_rows])
        B = (S2[g] - f[:, :, None] * X2d[g]) / phi[:, None, None]
        hess = -(B.sum(axis=0) - a.T @ a)
    if penalizer:
        value -= 0.5 * penalizer * beta @ beta
        grad = grad - penalizer * beta
        if need_hess:
            hess = hess - penalizer * np.eye(len(beta))
    return value, grad, hess


def _check_right_censored(m: DesignMatrix):
    bad = [rid for rid, k in zip(m.row_ids, m.censoring) if k != "right"]
    if bad:
        raise CensoringError(f"only right-censored data are supported; "
                             f"{len(bad)} left/interval record(s), e.g. {bad[0]}")


def cox_partial_loglik(beta, m: DesignMatrix, ties: str = "efron", penalizer: float = 0.0):
    """Log partial likelihood, gradient and Hessian at ``beta``.

    ``penalizer`` subtracts ``penalizer/2 * |beta|^2``.
    """
    _check_right_censored(m)
    rs = _RiskSets(m.values, m.time, m.event, ties)
    return _loglik(rs, np.asarray(beta, dtype=float), penalizer)


# ---------------------------------------------------------------------------
# Cox model

@dataclass(frozen=True)
class CoxModel:
    """Fitted Cox model.

    The Breslow baseline is stored at the training covariate means
    (``center``); :meth:`cumulative_hazard` converts it to x = 0.
    """

    beta: np.ndarray
    column_names: tuple[str, ...]
    baseline_times: np.ndarray
    centered_cumhaz: np.ndarray
    center: np.ndarray
    penalizer: float
    ties: str
    converged: bool
    iterations: int
    final_loglik: float
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def p(self):
        return len(self.beta)

    def _centered(self, t):
        idx = np.searchsorted(self.baseline_times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], self.centered_cumhaz])[idx]

    def cumulative_hazard(self, t):
        """Baseline cumulative hazard H0(t) at x = 0."""
        with np.errstate(over="ignore"):
            return self._centered(t) * np.exp(-self.beta @ self.center)

    @property
    def baseline_cumhaz(self):
        return self.cumulative_hazard(self.baseline_times)

    def linear_predictor(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[-1]}")
        return X @ self.beta

    def predict_risk(self, m: DesignMatrix):
        """Linear predictor for a design matrix, matching columns by name."""
        idx = [m.columns.index(c) for c in self.column_names]
        return m.values[:, idx] @ self.beta

    def to_json_dict(self) -> dict:
        return {
            "model": "cox",
            "columns": list(self.column_names),
            "beta": [float(b) for b in self.beta],
            "penalizer": self.penalizer,
            "ties": self.ties,
            "baseline_hazard": {"times": [float(t) for t in self.baseline_times],
                                "cumhaz": [float(h) for h in self.baseline_cumhaz],
                                "center": [float(c) for c in self.center],
                                "centered_cumhaz": [float(h) for h in self.centered_cumhaz]},
            "convergence": {"converged": self.converged, "iterations": self.iterations,
                            "final_loglik": self.final_loglik,
                            "trace": [float(v) for v in self.loglik_trace]},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CoxModel":
        conv = d["convergence"]
        bh = d["baseline_hazard"]
        return cls(np.asarray(d["beta"], dtype=float), tuple(d["columns"]),
                   np.asarray(bh["times"], dtype=float),
                   np.asarray(bh["centered_cumhaz"], dtype=float),
                   np.asarray(bh["center"], dtype=float),
                   d["penalizer"], d["ties"], conv["converged"], conv["iterations"],
                   conv["final_loglik"], tuple(conv.get("trace", ())))

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    def write_coefficients(self, path):
        write_coefficients(self.column_names, self.beta, path)


def write_coefficients(names, beta, path):
    """CSV of (name, beta, abs_beta), largest |beta| first."""
    rows = sorted(zip(names, beta), key=lambda r: (-abs(r[1]), r[0]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "beta", "abs_beta"])
        for name, b in rows:
            w.writerow([name, repr(float(b)), repr(abs(float(b)))])


def _standardize(X):
    mu = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
    sd = X.std(axis=0) if len(X) else np.ones(X.shape[1])
    live = sd > 0
    sd = np.where(live, sd, 1.0)
    return (X - mu) / sd, mu, sd, live


def _offending_columns(H, names, tol=1e-8):
    vals, vecs = np.linalg.eigh(-H)
    scale = max(abs(vals).max(), 1.0)
    bad = set()
    for k in np.flatnonzero(vals <= tol * scale):
        bad.update(np.flatnonzero(np.abs(vecs[:, k]) > 0.1))
    return [names[j] for j in sorted(bad)] or list(names)


def _newton(rs: _RiskSets, p, penalizer, tol, max_iter, max_halvings, names):
    beta = np.zeros(p)
    value, grad, hess = _loglik(rs, beta, penalizer)
    trace = [value]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            L = np.linalg.cholesky(-hess)
        except np.linalg.LinAlgError:
            raise SingularHessianError(_offending_columns(hess, names)) from None
        if np.min(np.diag(L)) ** 2 < 1e-12 * max(np.max(np.diag(L)) ** 2, 1.0):
            raise SingularHessianError(_offending_columns(hess, names))
        step = np.linalg.solve(-hess, grad)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            # an overshooting step may overflow; it is rejected below as non-finite
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                new_value, new_grad, new_hess = _loglik(rs, cand, penalizer)
            if np.isfinite(new_value) and new_value >= value:
                break
            t *= 0.5
        else:
            # no improving step left: converged if Newton's predicted gain is below tol
            converged = 0.5 * float(grad @ step) < tol
            break
        delta = new_value - value
        beta, value, grad, hess = cand, new_value, new_grad, new_hess
        trace.append(value)
        if abs(delta) < tol:
            converged = True
            break
    return beta, value, hess, converged, it, trace


def cox_fit(m: DesignMatrix, penalizer: float = 0.0, ties: str = "efron", tol: float = 1e-7,
            max_iter: int = 100, max_halvings: int = 10, standardize: bool = True) -> CoxModel:
    """Fit a Cox model by Newton-Raphson from beta = 0.

    The ridge penalty acts on standardized coefficients when ``standardize`` is
    on. Columns that are constant in ``m`` get coefficient 0 and a warning.
    """
    _check_right_censored(m)
    if penalizer < 0:
        raise ValueError("penalizer must be >= 0")
    X = m.values
    if standardize:
        Z, mu, sd, live = _standardize(X)
    else:
        Z, mu, sd = X, np.zeros(m.p), np.ones(m.p)
        live = np.ones(m.p, dtype=bool)
        if m.n:
            live = ~np.all(X == X[0], axis=0)
    if not live.all():
        dead = [c for c, ok in zip(m.columns, live) if not ok]
        warnings.warn(f"constant column(s) given zero coefficient: {', '.join(dead)}",
                      ConvergenceWarning, stacklevel=2)
    names = [c for c, ok in zip(m.columns, live) if ok]
    rs = _RiskSets(Z[:, live], m.time, m.event, ties)
    b, value, _, converged, iters, trace = _newton(rs, int(live.sum()), penalizer, tol,
                                                    max_iter, max_halvings, names)
    if not converged:
        warnings.warn(f"Cox fit did not converge in {iters} iterations", ConvergenceWarning,
                      stacklevel=2)
    beta = np.zeros(m.p)
    beta[live] = b / sd[live]
    center = X.mean(axis=0) if m.n else np.zeros(m.p)
    times, cumhaz = breslow_baseline(X - center, m.time, m.event, beta)
    return CoxModel(beta, tuple(m.columns), times, cumhaz, center, float(penalizer), ties,
                    converged, iters, float(value), tuple(trace))


def breslow_baseline(X, time, event, beta):
    """Breslow cumulative hazard for a subject with covariates 0, at each event time."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    eta = np.asarray(X, dtype=float) @ beta
    order = np.argsort(time, kind="mergesort")
    t, e, eta = time[order], event[order], eta[order]
    uniq = np.unique(t[e])
    if uniq.size == 0:
        return uniq, uniq.copy()
    start = np.searchsorted(t, uniq, side="left")
    # log of sum_{j: t_j >= u} exp(eta_j), computed from the tail
    log_tail = np.logaddexp.accumulate(eta[::-1])[::-1]
    d = np.bincount(np.searchsorted(uniq, t[e]), minlength=uniq.size)
    increments = np.exp(np.log(d) - log_tail[start])
    return uniq, np.cumsum(increments)


def cox_risk_score(model: CoxModel, x) -> float:
    """exp(beta . x)."""
    return float(np.exp(model.linear_predictor(x)))


def cox_survival(model: CoxModel, x, t) -> float:
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    x = np.asarray(x, dtype=float)
    rel = model.linear_predictor(x) - model.beta @ model.center
    return np.exp(-model._centered(t) * np.exp(rel))


# ---------------------------------------------------------------------------
# Weibull PH

@dataclass(frozen=True)
class WeibullPhModel:
    beta: np.ndarray
    shape: float
    scale: float
    column_names: tuple[str, ...]
    converged: bool
    loglik: float

    def cumulative_hazard(self, x, t):
        return (np.asarray(t, dtype=float) / self.scale) ** self.shape * np.exp(np.asarray(x) @ self.beta)

    def survival(self, x, t):
        return np.exp(-self.cumulative_hazard(x, t))

    def predict_risk(self, m: DesignMatrix):
        idx = [m.columns.index(c) for c in self.column_names]
        return m.values[:, idx] @ self.beta

    def to_json_dict(self) -> dict:
        return {"model": "weibull", "columns": list(self.column_names),
                "beta": [float(b) for b in self.beta], "shape": self.shape,
                "scale": self.scale, "converged": self.converged, "loglik": self.loglik}


def weibull_loglik(params, Z, time, event):
    """Negative log-likelihood and gradient in (log shape, log scale, beta)."""
    log_k, log_lam, beta = params[0], params[1], params[2:]
    k = np.exp(log_k)
    eta = Z @ beta
    logt = np.log(np.where(time > 0, time, 1.0))
    u = logt - log_lam
    # H_i = (t/lam)^k e^eta, zero when t = 0
    H = np.where(time > 0, np.exp(k * u + eta), 0.0)
    ll = np.sum(event * (log_k - log_lam + (k - 1) * u + eta)) - H.sum()
    g_logk = np.sum(event * (1 + k * u)) - np.sum(H * k * u)
    g_loglam = -k * np.sum(event) + k * H.sum()
    g_beta = Z.T @ (event - H)
    return -ll, -np.concatenate([[g_logk, g_loglam], g_beta])


def weibull_ph_fit(m: DesignMatrix, tol: float = 1e-7, max_iter: int = 500) -> WeibullPhModel:
    """Maximum likelihood Weibull PH fit, hazard (k/lam)(t/lam)^(k-1) exp(beta . x)."""
    _check_right_censored(m)
    event = m.event.astype(float)
    if not m.event.any():
        raise ValueError("Weibull fit needs at least one event")
    if np.any(m.time[m.event] <= 0):
        raise ValueError("event times must be positive")
    Z, mu, sd, live = _standardize(m.values)
    Z = Z[:, live]
    pos = m.time[m.time > 0]
    # exponential starting point
    lam0 = np.log(pos.sum() / max(event.sum(), 1.0))
    x0 = np.concatenate([[0.0, lam0], np.zeros(Z.shape[1])])
    res = optimize.minimize(weibull_loglik, x0, args=(Z, m.time, event), jac=True,
                            method="BFGS", options={"gtol": 1e-6, "maxiter": max_iter})
    converged = bool(res.success) or float(np.max(np.abs(res.jac))) < 1e-4
    if not converged:
        warnings.warn(f"Weibull fit did not converge: {res.message}", ConvergenceWarning,
                      stacklevel=2)
    k = float(np.exp(res.x[0]))
    beta = np.zeros(m.p)
    beta[live] = res.x[2:] / sd[live]
    # undo centering: exp(-c) folds into the scale
    c = float(np.sum(res.x[2:] * mu[live] / sd[live]))
    scale = float(np.exp(res.x[1] + c / k))
    return WeibullPhModel(beta, k, scale, tuple(m.columns), converged, float(-res.fun))
