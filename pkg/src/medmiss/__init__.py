"""Interventional mediation effects under multivariable missing data.

A numpy/scipy toolkit: synthetic cohort generation with configurable
missingness mechanisms, doubly robust and Monte Carlo g-computation
estimators of interventional indirect/direct effects, multiple-imputation
strategies with two bootstrap variance-estimation orders, and a
replication harness with the standard simulation performance metrics.
"""

from .datagen import (
    Dataset,
    DgmParams,
    IndicatorModel,
    MdagSpec,
    calibrate_intercepts,
    default_dgm_params,
    default_mdag,
    generate_complete,
    impose_missingness,
    summarize_missingness,
)
from .glm import (
    FittedGlm,
    ModelFormula,
    build_design,
    draw_coefficients,
    fit_logistic,
    predict_prob,
    sample_bernoulli,
)
from .impute import (
    ImputationSpec,
    ImputedSet,
    MissingMethod,
    build_spec,
    complete_cases,
    mice_fcs,
    smcfcs,
)
from .mediation import (
    AnalysisSpec,
    MediationEstimate,
    default_analysis_spec,
    dr_gcomp,
    exact_oracle,
    mc_gcomp,
    stabilized_weights,
)
from .simstudy import (
    ScenarioConfig,
    TruthValues,
    compute_metrics,
    estimate_truth,
    report,
    run_scenario,
)
from .variance import (
    PooledResult,
    boot_mi,
    boot_variance,
    cca_boot,
    make_estimator,
    mi_boot,
    rubin_pool,
)

__version__ = "0.1.0"
