"""Compliance-adjusted cost-effectiveness estimation for randomised trials.

The package covers the full analysis ladder for correlated cost and QALY
endpoints under non-compliance and missing data: SUR/FGLS systems, Wald and
two-/three-stage least squares, a Bayesian reduced-form model, multiple
imputation and inverse probability weighting, incremental-net-benefit
summaries, a trial simulator with principal-strata compliance, and a Monte
Carlo harness that audits bias and interval coverage against ground truth.
"""

from .bayes import BayesIvConfig, PosteriorDraws, fit_bayes_iv, summarize_posterior
from .cea import CeaResult, ceac, icer, inb
from .data import (
    MissingPatternSummary,
    TrialDataset,
    enforce_monotone,
    load_csv,
    parse_schema,
    summarize_patterns,
    write_csv,
)
from .iv import CaceEstimate, itt_sur, pp_sur, three_sls, tsls, tsps, tsri, wald_cace
from .linreg import FitResult, SystemEstimate, fgls_system, logistic, ols
from .mc import McOptions, McReport, report_json, run_mc, toy_normal_mean_mc
from .missing import (
    ImputationSet,
    PomSpec,
    PooledEstimate,
    WeightVector,
    default_pom_spec,
    fit_pom,
    ipw_weights,
    mi_impute,
    pattern_mixture_offset,
    pool_cace,
    rubin_pool,
)
from .simulate import (
    DgpConfig,
    DgpTruth,
    MissingnessConfig,
    apply_missingness,
    generate_trial,
    population_truth,
    reference_dgp,
    reference_mar_dgp,
)

__all__ = [
    "BayesIvConfig",
    "PosteriorDraws",
    "fit_bayes_iv",
    "summarize_posterior",
    "CeaResult",
    "ceac",
    "icer",
    "inb",
    "MissingPatternSummary",
    "TrialDataset",
    "enforce_monotone",
    "load_csv",
    "parse_schema",
    "summarize_patterns",
    "write_csv",
    "CaceEstimate",
    "itt_sur",
    "pp_sur",
    "three_sls",
    "tsls",
    "tsps",
    "tsri",
    "wald_cace",
    "FitResult",
    "SystemEstimate",
    "fgls_system",
    "logistic",
    "ols",
    "McOptions",
    "McReport",
    "report_json",
    "run_mc",
    "toy_normal_mean_mc",
    "ImputationSet",
    "PomSpec",
    "PooledEstimate",
    "WeightVector",
    "default_pom_spec",
    "fit_pom",
    "ipw_weights",
    "mi_impute",
    "pattern_mixture_offset",
    "pool_cace",
    "rubin_pool",
    "DgpConfig",
    "DgpTruth",
    "MissingnessConfig",
    "apply_missingness",
    "generate_trial",
    "population_truth",
    "reference_dgp",
    "reference_mar_dgp",
]

__version__ = "0.1.0"
