"""Paired t-test and percentile bootstrap for C-index differences."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc


class ZeroVariance(ValueError):
    pass


@dataclass(frozen=True)
class PairedTTestResult:
    t_statistic: float
    p_value: float
    df: int
    mean_diff: float
    sd_diff: float
    n: int


@dataclass(frozen=True)
class BootstrapInterval:
    lo: float
    hi: float
    level: float
    replicates: int


def c_index_diff(with_geo: float, without_geo: float) -> float:
    for v in (with_geo, without_geo):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"C-index must lie in [0, 1], got {v}")
    return with_geo - without_geo


def t_sf(t: float, df: int) -> float:
    """Two-sided Student-t tail probability P(|T| >= |t|).

    Uses P = I_x(df/2, 1/2) with x = df / (df + t^2).
    """
    if df < 1:
        raise ValueError("df must be >= 1")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    if t == 0:
        return 1.0
    x = df / (df + t * t)
    return float(min(1.0, betainc(0.5 * df, 0.5, x)))


def paired_t_test(a, b) -> PairedTTestResult:
    """Two-sided paired t-test on ``a - b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and equally long")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((d - mean) ** 2) / (n - 1)
    # differences equal to rounding error count as no variance
    if var <= (1e-14 * max(abs(mean), np.abs(d).max(), 1e-300)) ** 2:
        raise ZeroVariance("differences have zero variance")
    sd = math.sqrt(var)
    t = mean / (sd / math.sqrt(n))
    return PairedTTestResult(t, t_sf(t, n - 1), n - 1, mean, sd, n)


def bootstrap_ci(d, level: float = 0.95, replicates: int = 2000, seed: int = 0) -> BootstrapInterval:
    """Percentile bootstrap interval for the mean of ``d``.

    Quantiles interpolate linearly between order statistics.
    """
    d = np.asarray(d, dtype=float)
    n = len(d)
    if n < 2:
        raise ValueError("bootstrap needs n >= 2")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(replicates, n))
    means = d[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2], method="linear")
    # a mean cannot leave the sample range; clamp away summation rounding
    mn, mx = d.min(), d.max()
    lo, hi = min(max(lo, mn), mx), min(max(hi, mn), mx)
    return BootstrapInterval(float(lo), float(hi), level, replicates)
