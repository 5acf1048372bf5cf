"""Survival models with state-level expected survival rate features."""

__version__ = "0.1.0"

from .data import (Cohort, CohortSchema, DesignMatrix, EncodingSpec, Subject, clean_cohort,
                   encode_covariates, load_cohort, prune_collinear, train_test_split)
from .estimators import cox_fit, cox_partial_loglik, kaplan_meier, weibull_ph_fit
from .experiment import ExperimentConfig, run_paired_fit, run_statewise, run_subset_ttest
from .geo import attach_state_esr, county_weights, state_esr
from .metrics import comparable_pairs, concordance_index
from .stats import bootstrap_ci, paired_t_test, t_sf

__all__ = [
    "Cohort", "CohortSchema", "DesignMatrix", "EncodingSpec", "Subject", "clean_cohort",
    "encode_covariates", "load_cohort", "prune_collinear", "train_test_split", "cox_fit",
    "cox_partial_loglik", "kaplan_meier", "weibull_ph_fit", "ExperimentConfig",
    "run_paired_fit", "run_statewise", "run_subset_ttest", "attach_state_esr",
    "county_weights", "state_esr", "comparable_pairs", "concordance_index", "bootstrap_ci",
    "paired_t_test", "t_sf",
]
