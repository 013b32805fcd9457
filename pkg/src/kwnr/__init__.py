"""Kernel-weighted pseudoweights and nonresponse adjustment for
nonprobability survey samples.

Pipeline: fit a participation model on the combined cohort + reference
sample, spread reference design weights over cohort units by kernel
distance in balancing-score space, adjust respondent weights by fitted
response propensities, and estimate means with a two-term linearization
variance.  A seeded Monte Carlo study evaluates the estimators end to end.
"""

__version__ = "0.1.0"

from .data_model import (CohortSample, CohortSchema, DataValidationError,
                         Provenance, ReferenceSample, ReferenceSchema,
                         WeightSet, load_cohort_csv, load_reference_csv,
                         write_cohort_csv, write_reference_csv)
from .estimate import (DegenerateSubgroupError, EstimateReport,
                       TaylorDeviates, estimate_kwnr, estimate_subgroup,
                       estimate_with_variance, mean_weighted, taylor_deviates,
                       var1, var2)
from .glm import (ConvergenceError, DesignMatrix, DesignSpec, FitError,
                  PropensityFit, SeparationError, balancing_scores, expit,
                  fit_weighted_logistic, participation_fit, weighted_loglik)
from .kw import (KernelSpec, OrphanReferenceError, kw_pseudoweights,
                 silverman_bandwidth)
from .nr import NrConfig, ResponseFit, fit_response_model, kwnr_weights
from .sim import (MonteCarloResult, Population, PpsProbabilityError,
                  RepRecord, SimMetrics, SimScenario, SimulationFailureError,
                  draw_pps_cohort, draw_srs_reference, generate_population,
                  inclusion_probabilities, run_monte_carlo, run_replicate,
                  run_study, summarize)

__all__ = [
    "__version__",
    "CohortSample", "CohortSchema", "DataValidationError", "Provenance",
    "ReferenceSample", "ReferenceSchema", "WeightSet",
    "load_cohort_csv", "load_reference_csv",
    "write_cohort_csv", "write_reference_csv",
    "DegenerateSubgroupError", "EstimateReport", "TaylorDeviates",
    "estimate_kwnr", "estimate_subgroup", "estimate_with_variance",
    "mean_weighted", "taylor_deviates", "var1", "var2",
    "ConvergenceError", "DesignMatrix", "DesignSpec", "FitError",
    "PropensityFit", "SeparationError", "balancing_scores", "expit",
    "fit_weighted_logistic", "participation_fit", "weighted_loglik",
    "KernelSpec", "OrphanReferenceError", "kw_pseudoweights",
    "silverman_bandwidth",
    "NrConfig", "ResponseFit", "fit_response_model", "kwnr_weights",
    "MonteCarloResult", "Population", "PpsProbabilityError", "RepRecord",
    "SimMetrics", "SimScenario", "SimulationFailureError",
    "draw_pps_cohort", "draw_srs_reference", "generate_population",
    "inclusion_probabilities", "run_monte_carlo", "run_replicate",
    "run_study", "summarize",
]
