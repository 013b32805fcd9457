"""Shared builders: small synthetic datasets exercising the full pipeline."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kwnr.data_model import CohortSample, ReferenceSample
from kwnr.glm import DesignSpec, balancing_scores, expit, participation_fit
from kwnr.kw import kw_pseudoweights
from kwnr.nr import fit_response_model

settings.register_profile(
    "suite", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def synthetic_cohort(n_c=500, seed=3, shift=0.3, subgroups=None,
                     beta_y=(-0.5, 0.5), beta_r=(0.2, 0.5)):
    """Cohort with covariate-driven outcome and response, like the study data."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_c) + shift
    y = (rng.random(n_c) < expit(beta_y[0] + beta_y[1] * x)).astype(float)
    respond = (rng.random(n_c) < expit(beta_r[0] + beta_r[1] * x)).astype(int)
    # guarantee both response classes so the propensity fit is well posed
    respond[0], respond[1] = 1, 0
    sub = None
    if subgroups is not None:
        sub = np.asarray(subgroups)[rng.integers(0, len(subgroups), n_c)]
    return CohortSample(x=x[:, None], z=x[:, None], respond=respond, y=y,
                        subgroup=sub)


def synthetic_reference(n_s=250, seed=4, d=40.0):
    rng = np.random.default_rng(seed)
    return ReferenceSample(x=rng.standard_normal(n_s)[:, None],
                           d=np.full(n_s, d))


def build_pipeline(cohort, reference):
    """participation fit -> balancing scores -> KW weights -> response fit."""
    design = DesignSpec()
    pfit = participation_fit(cohort, reference)
    b_c = balancing_scores(pfit, design.expand(cohort.x))
    b_s = balancing_scores(pfit, design.expand(reference.x))
    kw = kw_pseudoweights(b_c, b_s, reference.d)
    rfit = fit_response_model(cohort, design.expand(cohort.z), kw)
    return kw, rfit


@pytest.fixture(scope="session")
def pipeline():
    """One medium pipeline shared by read-only tests."""
    cohort = synthetic_cohort(n_c=500, seed=3)
    reference = synthetic_reference(n_s=250, seed=4)
    kw, rfit = build_pipeline(cohort, reference)
    return cohort, reference, kw, rfit
