"""Point estimates and Taylor-linearization variances for adjusted means."""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import CohortSample, Provenance, WeightSet
from .nr import ResponseFit

Z95 = 1.959964
# Refuse variance corrections through a numerically singular information.
_MAX_CONDITION = 1e12


class DegenerateSubgroupError(ValueError):
    """Subgroup has no respondents (or no members), so no estimate exists."""


@dataclass(frozen=True)
class TaylorDeviates:
    """Per-record linearization deviates.

    ``delta_c`` feeds the cohort-selection variance term and is defined for
    every cohort record.  ``delta_r`` feeds the response-sampling term; it is
    zero at nonrespondents, which never enter that term.
    """

    delta_c: np.ndarray
    delta_r: np.ndarray


@dataclass(frozen=True)
class EstimateReport:
    estimate: float
    var1: Optional[float]
    var2: Optional[float]
    var_total: Optional[float]
    se: Optional[float]
    ci95: Optional[tuple]
    n_used: int
    n_resp: int
    variance_reason: Optional[str] = None


def mean_weighted(y: np.ndarray, w: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> float:
    """Ratio mean sum(w*y)/sum(w) over the masked records."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if y.shape != w.shape:
        raise ValueError("y and w must have matching shapes")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        y = y[mask]
        w = w[mask]
    total = w.sum()
    if not total > 0.0:
        raise ValueError("weight mass is zero over the requested records")
    return float(np.dot(w, y) / total)


def estimate_kwnr(cohort: CohortSample, kw: WeightSet,
                  rfit: ResponseFit) -> float:
    """Nonresponse-adjusted mean: respondents weighted by d_i / r_i."""
    _check_alignment(cohort, kw, rfit)
    if cohort.y is None:
        raise ValueError("cohort has no outcome column")
    a = np.where(cohort.respond_mask, kw.values / rfit.propensities, 0.0)
    return mean_weighted(cohort.y, a, cohort.respond_mask)


def _check_alignment(cohort: CohortSample, kw: WeightSet,
                     rfit: ResponseFit) -> None:
    if kw.provenance is not Provenance.KW:
        raise ValueError(f"expected KW weights, got {kw.provenance.value}")
    if kw.values.shape[0] != cohort.n_c:
        raise ValueError("KW weights must align with cohort records")
    if rfit.propensities.shape[0] != cohort.n_c:
        raise ValueError("response fit must align with cohort records")


def _solve_info(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > _MAX_CONDITION:
        raise np.linalg.LinAlgError(
            f"response information matrix is ill-conditioned (cond={cond:.3g})"
        )
    return np.linalg.solve(info, rhs)


def taylor_deviates(cohort: CohortSample, kw: WeightSet, rfit: ResponseFit,
                    center: float,
                    domain_mask: Optional[np.ndarray] = None) -> TaylorDeviates:
    """Linearization deviates for the adjusted mean (or a domain mean).

    ``center`` must be the point estimate the deviates expand around.  With a
    ``domain_mask``, direct contributions are restricted to the domain while
    the propensity-score correction still runs over all respondents, and the
    normalizer is the domain weight mass.
    """
    _check_alignment(cohort, kw, rfit)
    if cohort.y is None:
        raise ValueError("cohort has no outcome column")
    resp = cohort.respond_mask
    if domain_mask is None:
        dom = np.ones(cohort.n_c, dtype=bool)
    else:
        dom = np.asarray(domain_mask, dtype=bool)
        if dom.shape[0] != cohort.n_c:
            raise ValueError("domain mask must align with cohort records")

    d_hat = kw.values
    r = rfit.propensities
    Z = rfit.design.matrix
    d_star = rfit.base_weights
    a = np.where(resp, d_hat / r, 0.0)
    denom = float(np.dot(a, dom))
    if not denom > 0.0:
        raise ValueError("zero adjusted weight mass over the domain")

    resid = np.where(resp & dom, np.where(resp, cohort.y, 0.0) - center, 0.0)

    # Score of the response pseudo-likelihood; zero at convergence, kept so
    # the deviates are exact derivatives even at loose tolerances.
    score = Z.T @ (d_star * (resp.astype(float) - r))
    info = rfit.info_matrix
    brace = 1.0 - (1.0 - r) * (Z @ _solve_info(info, score))
    delta_c = a * resid * brace / denom

    # Correction for the fitted propensities: derivative of the estimator
    # through the refitted response coefficients.
    v = Z.T @ (a * (1.0 - r) * resid)
    t = d_star * (Z @ _solve_info(info, v))
    delta_r = np.where(resp, (a * resid - t) / denom, 0.0)
    return TaylorDeviates(delta_c=delta_c, delta_r=delta_r)


def var1(delta_c: np.ndarray) -> float:
    """With-replacement dispersion of the deviate total.

    With realized response indicators embedded in the deviates this
    estimates the combined selection-plus-response variance.
    """
    delta_c = np.asarray(delta_c, dtype=float)
    n = delta_c.shape[0]
    if n < 2:
        raise ValueError("var1 needs at least two cohort records")
    centered = delta_c - delta_c.mean()
    return float(n / (n - 1) * np.dot(centered, centered))


def var2(delta_r_resp: np.ndarray, n_resp: int, n_cohort: int) -> float:
    """Response-phase variance, simple-random-subsample form.

    Takes the respondent deviates only.  With fewer than two respondents the
    term is not estimable; warns and returns 0.
    """
    delta_r_resp = np.asarray(delta_r_resp, dtype=float)
    if not 0 < n_resp <= n_cohort:
        raise ValueError("need 0 < n_resp <= n_cohort")
    if delta_r_resp.shape[0] != n_resp:
        raise ValueError("deviates must cover exactly the respondents")
    if n_resp < 2:
        warnings.warn("var2 not estimable with a single respondent; using 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(n_resp * (1.0 - n_resp / n_cohort)
                 * np.var(delta_r_resp, ddof=1))


def _build_report(est: float, dispersion: float, v2: float, n_used: int,
                  n_resp: int) -> EstimateReport:
    # The deviate dispersion estimates the full two-phase variance: the
    # response indicators sit inside delta_c, so by total variance the
    # response-phase noise is already included.  Report the participation
    # component by difference so var1 + var2 recovers the dispersion.
    v1 = max(dispersion - v2, 0.0)
    vt = v1 + v2
    se = float(np.sqrt(vt))
    return EstimateReport(
        estimate=est, var1=v1, var2=v2, var_total=vt, se=se,
        ci95=(est - Z95 * se, est + Z95 * se),
        n_used=n_used, n_resp=n_resp,
    )


def estimate_with_variance(cohort: CohortSample, kw: WeightSet,
                           rfit: ResponseFit) -> EstimateReport:
    """Adjusted mean with the two-term linearization variance."""
    est = estimate_kwnr(cohort, kw, rfit)
    dev = taylor_deviates(cohort, kw, rfit, est)
    resp = cohort.respond_mask
    disp = var1(dev.delta_c)
    v2 = var2(dev.delta_r[resp], cohort.n_r, cohort.n_c)
    return _build_report(est, disp, v2, cohort.n_c, cohort.n_r)


def estimate_subgroup(cohort: CohortSample, kw: WeightSet, rfit: ResponseFit,
                      label: str) -> EstimateReport:
    """Adjusted mean for one subgroup of the cohort.

    The variance terms keep the full-cohort respondent counts: the subgroup
    is a domain, not a design stratum.  A single responding member yields an
    estimate with no variance (reason 'n_resp<2').
    """
    _check_alignment(cohort, kw, rfit)
    if cohort.subgroup is None:
        raise ValueError("cohort has no subgroup column")
    dom = cohort.subgroup == label
    if not dom.any():
        raise DegenerateSubgroupError(f"subgroup {label!r} has no members")
    resp = cohort.respond_mask
    resp_dom = dom & resp
    n_resp_dom = int(resp_dom.sum())
    if n_resp_dom == 0:
        raise DegenerateSubgroupError(
            f"subgroup {label!r} has no responding members"
        )
    a = np.where(resp, kw.values / rfit.propensities, 0.0)
    est = mean_weighted(cohort.y, a, resp_dom)
    if n_resp_dom < 2:
        return EstimateReport(
            estimate=est, var1=None, var2=None, var_total=None, se=None,
            ci95=None, n_used=int(dom.sum()), n_resp=n_resp_dom,
            variance_reason="n_resp<2",
        )
    dev = taylor_deviates(cohort, kw, rfit, est, domain_mask=dom)
    disp = var1(dev.delta_c)
    v2 = var2(dev.delta_r[resp], cohort.n_r, cohort.n_c)
    return _build_report(est, disp, v2, int(dom.sum()), n_resp_dom)
