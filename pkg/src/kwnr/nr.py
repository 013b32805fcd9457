"""Follow-up response-propensity model and nonresponse-adjusted weights."""

from dataclasses import dataclass

import numpy as np

from .data_model import CohortSample, Provenance, WeightSet
from .glm import DesignMatrix, PropensityFit, fit_weighted_logistic


@dataclass(frozen=True)
class NrConfig:
    """base_weight_mode picks the pseudo-likelihood weights d*: the baseline
    kernel weights ('kw') or a common value of one ('unit')."""

    base_weight_mode: str = "kw"
    propensity_floor: float = 0.01

    def __post_init__(self):
        if self.base_weight_mode not in ("kw", "unit"):
            raise ValueError("base_weight_mode must be 'kw' or 'unit'")
        if not 0.0 < self.propensity_floor < 0.5:
            raise ValueError("propensity_floor must be in (0, 0.5)")


@dataclass(frozen=True)
class ResponseFit:
    """Fitted response-propensity model, floored propensities for weighting.

    ``fit`` is unfloored; ``propensities`` is the weighting vector with the
    floor applied.  ``base_weights`` are the d* used in the pseudo-likelihood
    and ``design`` the z-model matrix, both kept for variance estimation.
    """

    fit: PropensityFit
    design: DesignMatrix
    base_weights: np.ndarray
    propensities: np.ndarray
    floored_count: int
    config: NrConfig

    @property
    def info_matrix(self):
        return self.fit.info_matrix


def fit_response_model(cohort: CohortSample, Z: DesignMatrix,
                       base_weights: WeightSet,
                       cfg: NrConfig = NrConfig()) -> ResponseFit:
    """Weighted logistic pseudo-MLE of response on the z-design.

    The fit itself is unfloored; the floor applies only to the propensities
    used for weighting (caps adjustment factors at 1/floor).
    """
    n_r = cohort.n_r
    if n_r == 0 or n_r == cohort.n_c:
        raise ValueError(
            "response model needs both respondents and nonrespondents "
            f"(n_r={n_r} of {cohort.n_c})"
        )
    if cfg.base_weight_mode == "unit":
        d_star = np.ones(cohort.n_c)
    else:
        if base_weights.provenance is not Provenance.KW:
            raise ValueError(
                f"base_weight_mode 'kw' needs KW weights, got "
                f"{base_weights.provenance.value}"
            )
        d_star = base_weights.values
    if d_star.shape[0] != cohort.n_c:
        raise ValueError("base weights must align with cohort records")

    fit = fit_weighted_logistic(Z, cohort.respond, d_star)
    floored = np.maximum(fit.fitted, cfg.propensity_floor)
    return ResponseFit(
        fit=fit,
        design=Z,
        base_weights=d_star,
        propensities=floored,
        floored_count=int(np.sum(fit.fitted < cfg.propensity_floor)),
        config=cfg,
    )


def kwnr_weights(kw: WeightSet, rfit: ResponseFit,
                 cohort: CohortSample) -> WeightSet:
    """Nonresponse-adjusted weights d_i / r_i for respondents, 0 otherwise."""
    if kw.provenance is not Provenance.KW:
        raise ValueError(f"expected KW weights, got {kw.provenance.value}")
    if kw.values.shape[0] != cohort.n_c:
        raise ValueError("KW weights must align with cohort records")
    r = rfit.propensities
    if np.any(r < rfit.config.propensity_floor):
        raise AssertionError("propensity below floor after flooring")
    values = np.where(cohort.respond_mask, kw.values / r, 0.0)
    return WeightSet(values, Provenance.KWNR)
