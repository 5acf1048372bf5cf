import warnings

import numpy as np
import pytest
from hypothesis import settings

from geosurv.estimators import ConvergenceWarning

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_convergence():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def exp_two_group(n, hr, cens_frac, seed):
    """Exponential two-group data with hazard ratio ``hr`` and uniform censoring."""
    r = np.random.default_rng(seed)
    x = (r.random(n) < 0.5).astype(float)
    t = r.exponential(1.0 / np.where(x == 1, hr, 1.0))
    # censoring rate c for an exponential competing time gives P(C < T) = c / (c + lambda)
    lam = 0.5 * (1 + hr)
    c_rate = cens_frac * lam / (1 - cens_frac)
    c = r.exponential(1.0 / c_rate, size=n)
    return x, np.minimum(t, c), t <= c


def synth_with_esr(**kw):
    """Synthetic cohort with the state_esr covariate attached from its own tables."""
    from geosurv.geo import attach_state_esr
    from geosurv.synth import SynthConfig, generate_cohort, generate_tables

    cfg = SynthConfig(**kw)
    tables = generate_tables(cfg)
    sc = generate_cohort(cfg, tables)
    cohort, _ = attach_state_esr(sc.cohort, tables.esr, tables.population)
    return cohort


# geography-dependent hazard strong enough to be seen in 30 subsets
PLANTED = dict(n_subjects=50_000, n_states=5, geo_effect_scale=1.0, state_offset_sd=1.0,
               censoring_target=0.88, seed=7)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
