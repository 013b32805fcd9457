"""Point estimates, Taylor deviates, variance terms, subgroup estimation."""

import dataclasses

import numpy as np
import pytest
import scipy.optimize

from kwnr.data_model import CohortSample, Provenance, WeightSet
from kwnr.estimate import (DegenerateSubgroupError, estimate_kwnr,
                           estimate_subgroup, estimate_with_variance,
                           mean_weighted, taylor_deviates, var1, var2)
from kwnr.glm import DesignSpec, expit
from kwnr.nr import fit_response_model

from conftest import build_pipeline, synthetic_cohort, synthetic_reference
from test_nr import manual_response_fit

Z95 = 1.959964


# ------------------------------------------------------------ mean_weighted


def test_mean_weighted_examples():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert mean_weighted(y, np.full(4, 2.0)) == 0.5
    assert mean_weighted(np.array([0.0, 1.0]), np.array([1.0, 3.0])) == 0.75
    w = np.array([1.0, 3.0])
    assert mean_weighted(np.array([0.0, 1.0]), 7.0 * w) == \
        mean_weighted(np.array([0.0, 1.0]), w)


def test_mean_weighted_mask_and_errors():
    y = np.array([1.0, 0.0, 1.0])
    w = np.array([1.0, 1.0, 1.0])
    assert mean_weighted(y, w, np.array([True, False, True])) == 1.0
    with pytest.raises(ValueError, match="zero"):
        mean_weighted(y, np.zeros(3))
    with pytest.raises(ValueError, match="shape"):
        mean_weighted(y, w[:2])


# ------------------------------------------------------------ kwnr estimate


def test_estimate_reduces_to_kw_under_full_response():
    y = np.array([1.0, 0.0, 1.0, 1.0])
    kw_vals = np.array([2.0, 3.0, 1.0, 4.0])
    cohort = CohortSample(x=np.zeros((4, 1)), z=np.zeros((4, 1)),
                          respond=np.ones(4), y=y)
    rfit = manual_response_fit(np.ones(4))
    kw = WeightSet(kw_vals, Provenance.KW)
    assert estimate_kwnr(cohort, kw, rfit) == pytest.approx(
        mean_weighted(y, kw_vals), rel=1e-12)


def test_kw_with_equal_weights_is_unweighted_mean():
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    cohort = CohortSample(x=np.zeros((5, 1)), z=np.zeros((5, 1)),
                          respond=np.ones(5), y=y)
    rfit = manual_response_fit(np.ones(5))
    kw = WeightSet(np.full(5, 2.5), Provenance.KW)
    assert estimate_kwnr(cohort, kw, rfit) == pytest.approx(y.mean(),
                                                            rel=1e-12)


def test_single_respondent_returns_its_outcome():
    cohort = CohortSample(x=np.zeros((3, 1)), z=np.zeros((3, 1)),
                          respond=[0, 1, 0], y=[np.nan, 0.7, np.nan])
    rfit = manual_response_fit([0.5, 0.5, 0.5])
    kw = WeightSet([1.0, 2.0, 3.0], Provenance.KW)
    assert estimate_kwnr(cohort, kw, rfit) == pytest.approx(0.7)


def test_estimate_requires_outcome():
    cohort = CohortSample(x=np.zeros((2, 1)), z=np.zeros((2, 1)),
                          respond=[1, 0])
    rfit = manual_response_fit([0.5, 0.5])
    with pytest.raises(ValueError, match="outcome"):
        estimate_kwnr(cohort, WeightSet([1.0, 1.0], Provenance.KW), rfit)


# ----------------------------------------------------------- variance terms


def test_var1_examples():
    assert var1(np.full(5, 0.3)) == 0.0
    a = 0.7
    assert var1(np.array([a, -a])) == pytest.approx(4 * a * a, rel=1e-12)
    with pytest.raises(ValueError, match="at least two"):
        var1(np.array([1.0]))


def test_var2_examples():
    assert var2(np.full(4, 0.2), 4, 4) == 0.0  # full response
    assert abs(var2(np.full(3, 0.2), 3, 6)) < 1e-30  # constant deviates
    assert var2(np.array([0.1, -0.1]), 2, 4) == pytest.approx(0.02, rel=1e-12)
    with pytest.warns(RuntimeWarning, match="single respondent"):
        assert var2(np.array([0.1]), 1, 4) == 0.0
    with pytest.raises(ValueError, match="n_resp"):
        var2(np.array([0.1]), 0, 4)
    with pytest.raises(ValueError, match="exactly"):
        var2(np.array([0.1, 0.2]), 3, 4)


def test_constant_outcome_gives_zero_variance(pipeline):
    cohort, _, kw, _ = pipeline
    const = dataclasses.replace(cohort, y=np.ones(cohort.n_c))
    rfit = fit_response_model(const, DesignSpec().expand(const.z), kw)
    report = estimate_with_variance(const, kw, rfit)
    assert report.estimate == pytest.approx(1.0, rel=1e-12)
    assert report.var_total == pytest.approx(0.0, abs=1e-24)


def test_report_structure(pipeline):
    cohort, _, kw, rfit = pipeline
    report = estimate_with_variance(cohort, kw, rfit)
    assert report.var_total == report.var1 + report.var2
    assert report.var1 >= 0 and report.var2 >= 0
    assert report.se == pytest.approx(np.sqrt(report.var_total))
    lo, hi = report.ci95
    assert lo == pytest.approx(report.estimate - Z95 * report.se)
    assert hi == pytest.approx(report.estimate + Z95 * report.se)
    assert report.n_used == cohort.n_c
    assert report.n_resp == cohort.n_r
    assert report.variance_reason is None


def test_deviate_centering(pipeline):
    cohort, _, kw, rfit = pipeline
    est = estimate_kwnr(cohort, kw, rfit)
    resp = cohort.respond_mask
    a = np.where(resp, kw.values / rfit.propensities, 0.0)
    resid = np.where(resp, np.where(resp, cohort.y, 0.0) - est, 0.0)
    # ratio-estimator identity: adjusted residuals sum to zero
    assert abs(np.dot(a, resid)) < 1e-9 * np.dot(a, np.abs(resid))


def test_weight_scale_invariance(pipeline):
    cohort, _, kw, rfit = pipeline
    report = estimate_with_variance(cohort, kw, rfit)
    kw2 = WeightSet(kw.values * 13.7, Provenance.KW)
    rfit2 = fit_response_model(cohort, rfit.design, kw2)
    report2 = estimate_with_variance(cohort, kw2, rfit2)
    assert report2.estimate == pytest.approx(report.estimate, rel=1e-10)
    assert report2.var1 == pytest.approx(report.var1, rel=1e-8)
    assert report2.var2 == pytest.approx(report.var2, rel=1e-8)


def test_nonrespondent_outcome_never_read(pipeline):
    cohort, _, kw, rfit = pipeline
    resp = cohort.respond_mask
    poisoned = np.array(cohort.y)
    poisoned[~resp] = 1e9  # any value here must not matter
    alt = dataclasses.replace(cohort, y=poisoned)
    r1 = estimate_with_variance(cohort, kw, rfit)
    r2 = estimate_with_variance(alt, kw, rfit)
    assert r1.estimate == r2.estimate
    assert r1.var_total == r2.var_total


def test_deviates_zero_for_nonrespondents(pipeline):
    cohort, _, kw, rfit = pipeline
    est = estimate_kwnr(cohort, kw, rfit)
    dev = taylor_deviates(cohort, kw, rfit, est)
    resp = cohort.respond_mask
    assert np.all(dev.delta_c[~resp] == 0)
    assert np.all(dev.delta_r[~resp] == 0)
    assert np.all(np.isfinite(dev.delta_c))
    assert np.all(np.isfinite(dev.delta_r))


def test_full_response_deviates_reduce_to_ratio_form():
    # with everyone responding at propensity 1, only the direct term remains
    rng = np.random.default_rng(51)
    n = 12
    y = rng.random(n)
    d_hat = rng.uniform(1, 3, n)
    cohort = CohortSample(x=np.zeros((n, 1)), z=np.zeros((n, 1)),
                          respond=np.ones(n), y=y)
    rfit = manual_response_fit(np.ones(n), d_star=d_hat)
    kw = WeightSet(d_hat, Provenance.KW)
    est = estimate_kwnr(cohort, kw, rfit)
    dev = taylor_deviates(cohort, kw, rfit, est)
    expected = d_hat * (y - est) / d_hat.sum()
    assert np.allclose(dev.delta_c, expected, rtol=1e-10)
    assert np.allclose(dev.delta_r, expected, rtol=1e-10)


def test_ill_conditioned_information_refused(pipeline):
    cohort, _, kw, rfit = pipeline
    bad_fit = dataclasses.replace(
        rfit.fit, info_matrix=np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]]))
    bad = dataclasses.replace(rfit, fit=bad_fit)
    with pytest.raises(np.linalg.LinAlgError, match="ill-conditioned"):
        taylor_deviates(cohort, kw, bad, 0.5)


# -------------------------------------------------- finite-difference oracle


def fractional_estimator(ind, y, d_hat, d_star, Z, gamma0):
    """kwNR mean at relaxed-continuous response indicators, refitting gamma."""

    def score(g):
        return Z.T @ (d_star * (ind - expit(Z @ g)))

    def jac(g):
        p = expit(Z @ g)
        return -(Z * (d_star * p * (1 - p))[:, None]).T @ Z

    sol = scipy.optimize.root(score, gamma0, jac=jac, tol=1e-12)
    assert sol.success
    r = expit(Z @ sol.x)
    num = np.sum(d_hat * ind * y / r)
    den = np.sum(d_hat * ind / r)
    return num / den


def test_delta_r_matches_finite_difference_oracle():
    rng = np.random.default_rng(53)
    n = 8
    z = rng.standard_normal(n)
    respond = np.array([1, 1, 0, 1, 0, 1, 1, 0])
    y = np.where(respond == 1, rng.random(n), np.nan)
    cohort = CohortSample(x=z[:, None], z=z[:, None], respond=respond, y=y)
    d_hat = rng.uniform(0.5, 2.5, n)
    kw = WeightSet(d_hat, Provenance.KW)
    Zm = DesignSpec().expand(cohort.z)
    rfit = fit_response_model(cohort, Zm, kw)
    assert rfit.floored_count == 0  # oracle assumes the floor is inactive

    est = estimate_kwnr(cohort, kw, rfit)
    dev = taylor_deviates(cohort, kw, rfit, est)

    ind = respond.astype(float)
    gamma0 = rfit.fit.coefficients
    y_safe = np.where(respond == 1, y, 0.0)  # multiplied by ind = 0 below
    eps = 1e-6
    fd = np.zeros(n)
    for l in np.nonzero(respond)[0]:
        up, dn = ind.copy(), ind.copy()
        up[l] += eps
        dn[l] -= eps
        fd[l] = (fractional_estimator(up, y_safe, d_hat, rfit.base_weights,
                                      Zm.matrix, gamma0)
                 - fractional_estimator(dn, y_safe, d_hat, rfit.base_weights,
                                        Zm.matrix, gamma0)) / (2 * eps)
    resp = cohort.respond_mask
    scale = np.max(np.abs(dev.delta_r[resp]))
    assert np.allclose(dev.delta_r[resp], fd[resp], rtol=1e-3,
                       atol=1e-3 * scale)


def test_braced_factor_is_one_at_convergence(pipeline):
    # the response-score correction inside the cohort deviate vanishes at the
    # fitted coefficients, leaving the plain ratio deviate
    cohort, _, kw, rfit = pipeline
    est = estimate_kwnr(cohort, kw, rfit)
    dev = taylor_deviates(cohort, kw, rfit, est)
    resp = cohort.respond_mask
    a = np.where(resp, kw.values / rfit.propensities, 0.0)
    plain = a * np.where(resp, np.nan_to_num(cohort.y) - est, 0.0) / \
        np.dot(a, np.ones(cohort.n_c))
    assert np.allclose(dev.delta_c, plain, rtol=1e-6, atol=1e-12)


# ------------------------------------------------------------------ subgroup


def subgroup_pipeline():
    cohort = synthetic_cohort(n_c=500, seed=3, subgroups=("A", "B"))
    reference = synthetic_reference(n_s=250, seed=4)
    kw, rfit = build_pipeline(cohort, reference)
    return cohort, kw, rfit


def test_subgroup_whole_cohort_identity():
    cohort = synthetic_cohort(n_c=400, seed=7, subgroups=("all",))
    reference = synthetic_reference(n_s=200, seed=8)
    kw, rfit = build_pipeline(cohort, reference)
    whole = estimate_with_variance(cohort, kw, rfit)
    sub = estimate_subgroup(cohort, kw, rfit, "all")
    assert sub.estimate == pytest.approx(whole.estimate, rel=1e-12)
    assert sub.var1 == pytest.approx(whole.var1, rel=1e-12)
    assert sub.var2 == pytest.approx(whole.var2, rel=1e-12)


def test_subgroup_partition_recovers_overall():
    cohort, kw, rfit = subgroup_pipeline()
    overall = estimate_kwnr(cohort, kw, rfit)
    resp = cohort.respond_mask
    a = np.where(resp, kw.values / rfit.propensities, 0.0)
    total, mass = 0.0, 0.0
    for label in ("A", "B"):
        rep = estimate_subgroup(cohort, kw, rfit, label)
        m = a[(cohort.subgroup == label) & resp].sum()
        total += rep.estimate * m
        mass += m
    assert total / mass == pytest.approx(overall, abs=1e-10)


def test_subgroup_matches_masked_mean():
    cohort, kw, rfit = subgroup_pipeline()
    resp = cohort.respond_mask
    a = np.where(resp, kw.values / rfit.propensities, 0.0)
    for label in ("A", "B"):
        rep = estimate_subgroup(cohort, kw, rfit, label)
        mask = (cohort.subgroup == label) & resp
        assert rep.estimate == pytest.approx(
            mean_weighted(cohort.y, a, mask), rel=1e-12)


def test_subgroup_correction_spans_all_respondents():
    # domain deviates keep the propensity correction active outside the domain
    cohort, kw, rfit = subgroup_pipeline()
    rep = estimate_subgroup(cohort, kw, rfit, "A")
    dev = taylor_deviates(cohort, kw, rfit, rep.estimate,
                          domain_mask=cohort.subgroup == "A")
    resp = cohort.respond_mask
    outside = resp & (cohort.subgroup != "A")
    assert np.any(dev.delta_r[outside] != 0)
    assert np.all(dev.delta_c[outside] == 0)  # direct term is domain-only


def test_subgroup_degenerate_policies():
    labels = np.array(["big"] * 396 + ["solo", "solo", "none", "none"])
    cohort = synthetic_cohort(n_c=400, seed=9)
    respond = np.array(cohort.respond)
    respond[396], respond[397] = 1, 0   # 'solo': one respondent
    respond[398], respond[399] = 0, 0   # 'none': members, no respondents
    y = np.where(respond == 1, np.nan_to_num(cohort.y, nan=1.0), np.nan)
    cohort = CohortSample(x=cohort.x, z=cohort.z, respond=respond, y=y,
                          subgroup=labels)
    reference = synthetic_reference(n_s=200, seed=10)
    kw, rfit = build_pipeline(cohort, reference)

    solo = estimate_subgroup(cohort, kw, rfit, "solo")
    assert solo.variance_reason == "n_resp<2"
    assert solo.var_total is None and solo.se is None and solo.ci95 is None
    assert solo.estimate == y[396]
    with pytest.raises(DegenerateSubgroupError, match="no responding"):
        estimate_subgroup(cohort, kw, rfit, "none")
    with pytest.raises(DegenerateSubgroupError, match="no members"):
        estimate_subgroup(cohort, kw, rfit, "absent")


def test_subgroup_requires_labels(pipeline):
    cohort, _, kw, rfit = pipeline
    with pytest.raises(ValueError, match="no subgroup column"):
        estimate_subgroup(cohort, kw, rfit, "A")
