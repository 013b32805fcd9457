"""Synthetic-population Monte Carlo study of the full weighting pipeline.

A scenario generates a finite population with one covariate, draws a PPS
volunteer cohort and an SRS reference sample, runs the weighting and
nonresponse adjustment, and aggregates six mean estimators over replicates.
Every replicate is a pure function of (master_seed, rep_index), so results
are identical across runs and across any level of parallelism.
"""

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data_model import (CohortSample, Provenance, ReferenceSample, WeightSet,
                         fmt17)
from .estimate import estimate_with_variance, mean_weighted
from .glm import DesignSpec, balancing_scores, expit, participation_fit
from .kw import KernelSpec, kw_pseudoweights
from .nr import NrConfig, fit_response_model, kwnr_weights

ESTIMATORS = ("true_weighted", "unweighted_c", "kw_c",
              "unweighted_r", "kw_r", "kwnr_r")

# Independent RNG streams per purpose; adding one never perturbs the others.
_STREAM_POPULATION = 0
_STREAM_PPS = 1
_STREAM_SRS = 2


class PpsProbabilityError(ValueError):
    """The requested PPS design pushes some inclusion probabilities past 1."""

    def __init__(self, count, max_pi):
        super().__init__(
            f"inclusion probability exceeds 1 for {count} unit(s) "
            f"(max {max_pi:.6g}); shrink n_c or the size-model slope, "
            "or enable certainty capping (allow_certainty)"
        )
        self.count = count
        self.max_pi = max_pi


class SimulationFailureError(RuntimeError):
    """More than 1% of replicates failed; carries sample diagnostics."""

    def __init__(self, failed, total, samples):
        lines = "\n".join(f"  rep {r}: {msg}" for r, msg in samples)
        super().__init__(
            f"{failed} of {total} replicates failed (>1%):\n{lines}"
        )
        self.failed = failed
        self.total = total


@dataclass(frozen=True)
class SimScenario:
    """Inputs of one simulation cell.

    beta_y drives the outcome model, beta_r the follow-up response model,
    beta_c the participation size model mos = exp(b0 + b1 x).  The default
    strict design errors out when any inclusion probability exceeds 1;
    allow_certainty instead caps those units at probability 1 (iteratively)
    and keeps the fixed sample size.
    """

    N: int = 200_000
    n_c: int = 8_000
    n_s: int = 2_000
    beta_y: tuple = (-0.5, 0.5)
    beta_r: tuple = (0.2, 0.5)
    beta_c: tuple = (-1.0, 0.5)
    reps: int = 2_000
    master_seed: int = 20_260_814
    nr_config: NrConfig = field(default_factory=NrConfig)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    fresh_population: bool = True
    allow_certainty: bool = False
    pps_flavor: str = "successive"

    def __post_init__(self):
        if self.N <= 0 or self.n_c <= 0 or self.n_s <= 0:
            raise ValueError("population and sample sizes must be positive")
        if self.n_c + self.n_s > self.N:
            raise ValueError("n_c + n_s must not exceed N")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.pps_flavor not in ("successive", "systematic"):
            raise ValueError("pps_flavor must be 'successive' or 'systematic'")
        for name in ("beta_y", "beta_r", "beta_c"):
            pair = getattr(self, name)
            if len(pair) != 2 or not all(np.isfinite(pair)):
                raise ValueError(f"{name} must be two finite numbers")
            object.__setattr__(self, name, (float(pair[0]), float(pair[1])))


@dataclass(frozen=True)
class Population:
    """Finite population: covariate, outcome, latent response status."""

    x: np.ndarray
    y: np.ndarray
    respond: np.ndarray


@dataclass(frozen=True)
class CohortDraw:
    cohort: CohortSample
    true_weights: WeightSet
    indices: np.ndarray


@dataclass(frozen=True)
class RepRecord:
    """One replicate's outputs; ``failed`` records pipeline errors."""

    rep_index: int
    failed: bool = False
    error: str = ""
    truth: float = float("nan")
    response_rate: float = float("nan")
    estimates: Optional[dict] = None
    var_kwnr: float = float("nan")
    var1: float = float("nan")
    var2: float = float("nan")
    cv_true: float = float("nan")
    cv_kw: float = float("nan")
    cv_kwnr: float = float("nan")
    n_resp: int = 0


@dataclass(frozen=True)
class EstimatorMetrics:
    rb_pct: float
    emp_var: float
    mse: float


@dataclass(frozen=True)
class SimMetrics:
    """Aggregates over the non-failed replicates of one cell."""

    estimators: dict
    vr: float
    mean_cv_true: float
    mean_cv_kw: float
    mean_cv_kwnr: float
    truth_mean: float
    response_rate_mean: float
    reps_done: int
    reps_failed: int


@dataclass(frozen=True)
class MonteCarloResult:
    scenario: SimScenario
    metrics: SimMetrics
    records: tuple


def _stream_seed(master_seed, rep_index, stream):
    return np.random.SeedSequence(int(master_seed),
                                  spawn_key=(int(rep_index), stream))


def generate_population(scn: SimScenario, seed) -> Population:
    """Draw x ~ N(0,1) and Bernoulli outcome/response given x."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(scn.N)
    p_y = expit(scn.beta_y[0] + scn.beta_y[1] * x)
    y = (rng.random(scn.N) < p_y).astype(np.int8)
    p_r = expit(scn.beta_r[0] + scn.beta_r[1] * x)
    respond = (rng.random(scn.N) < p_r).astype(np.int8)
    return Population(x=x, y=y, respond=respond)


def inclusion_probabilities(x, n_c, beta_c, *, allow_certainty=False):
    """PPS inclusion probabilities n_c * mos / sum(mos), mos = exp(b0+b1 x).

    When some probabilities exceed 1: error in strict mode, otherwise cap
    those units at 1 and redistribute the remaining draws proportionally
    (repeat until no unit exceeds 1).
    """
    x = np.asarray(x, dtype=float)
    mos = np.exp(beta_c[0] + beta_c[1] * x)
    pi = n_c * mos / mos.sum()
    if pi.max() <= 1.0:
        return pi
    if not allow_certainty:
        raise PpsProbabilityError(int(np.sum(pi > 1.0)), float(pi.max()))
    certain = np.zeros(x.shape[0], dtype=bool)
    rem_pi = pi
    while True:
        newly = np.nonzero(~certain)[0][rem_pi >= 1.0]
        if newly.size == 0:
            break
        certain[newly] = True
        k = n_c - int(certain.sum())
        rem = ~certain
        rem_pi = k * mos[rem] / mos[rem].sum() if k > 0 else np.zeros(rem.sum())
    out = np.ones(x.shape[0])
    out[~certain] = rem_pi
    return out


def draw_pps_cohort(pop: Population, n_c, beta_c, seed, *,
                    allow_certainty=False,
                    flavor="successive") -> CohortDraw:
    """Fixed-size PPS draw with size measure mos = exp(b0 + b1 x).

    'successive' selects the n_c winners of an exponential race with rates
    mos (sequential without-replacement PPS); weights are the reciprocals of
    the nominal probabilities n_c * mos / sum(mos).  'systematic' runs
    systematic PPS on a uniformly random permutation with those nominal
    probabilities, capped at 1 when allowed.  Either way, nominal
    probabilities above 1 error out unless allow_certainty is set.

    Returns the cohort (full outcome vector retained as simulation truth),
    the true design weights for the benchmark estimator, and the population
    indices of the selected units.
    """
    rng = np.random.default_rng(seed)
    x = pop.x
    if flavor == "successive":
        mos = np.exp(beta_c[0] + beta_c[1] * x)
        pi = n_c * mos / mos.sum()
        if pi.max() > 1.0 and not allow_certainty:
            raise PpsProbabilityError(int(np.sum(pi > 1.0)), float(pi.max()))
        race = rng.standard_exponential(x.shape[0]) / mos
        idx = np.sort(np.argpartition(race, n_c)[:n_c])
        d = 1.0 / pi[idx]
    elif flavor == "systematic":
        pi = inclusion_probabilities(x, n_c, beta_c,
                                     allow_certainty=allow_certainty)
        perm = rng.permutation(x.shape[0])
        cum = np.cumsum(pi[perm])
        # Rescale away float drift so the n_c selection points stay in range.
        cum *= n_c / cum[-1]
        points = rng.random() + np.arange(n_c)
        pos = np.searchsorted(cum, points, side="left")
        idx = perm[pos]
        if np.unique(idx).size != n_c:
            raise RuntimeError("systematic PPS produced a duplicate selection")
        d = 1.0 / pi[idx]
    else:
        raise ValueError("flavor must be 'successive' or 'systematic'")
    x_sel = x[idx]
    cohort = CohortSample(
        x=x_sel[:, None],
        z=x_sel[:, None],
        respond=pop.respond[idx],
        y=pop.y[idx].astype(float),
    )
    true_w = WeightSet(d, Provenance.TRUE_DESIGN)
    return CohortDraw(cohort=cohort, true_weights=true_w, indices=idx)


def draw_srs_reference(pop: Population, n_s, seed) -> ReferenceSample:
    """Uniform without-replacement reference sample, weights N/n_s."""
    if n_s > pop.x.shape[0]:
        raise ValueError("n_s must not exceed the population size")
    rng = np.random.default_rng(seed)
    idx = rng.choice(pop.x.shape[0], size=n_s, replace=False)
    d = np.full(n_s, pop.x.shape[0] / n_s)
    return ReferenceSample(x=pop.x[idx][:, None], d=d)


def run_replicate(scn: SimScenario, rep_index) -> RepRecord:
    """Run the full pipeline once; errors mark the record failed."""
    try:
        pop_rep = rep_index if scn.fresh_population else 0
        pop = generate_population(
            scn, _stream_seed(scn.master_seed, pop_rep, _STREAM_POPULATION))
        draw = draw_pps_cohort(
            pop, scn.n_c, scn.beta_c,
            _stream_seed(scn.master_seed, rep_index, _STREAM_PPS),
            allow_certainty=scn.allow_certainty, flavor=scn.pps_flavor)
        ref = draw_srs_reference(
            pop, scn.n_s,
            _stream_seed(scn.master_seed, rep_index, _STREAM_SRS))
        cohort = draw.cohort

        pfit = participation_fit(cohort, ref)
        design = DesignSpec()
        b_c = balancing_scores(pfit, design.expand(cohort.x))
        b_s = balancing_scores(pfit, design.expand(ref.x))
        kw = kw_pseudoweights(b_c, b_s, ref.d, scn.kernel)
        rfit = fit_response_model(cohort, design.expand(cohort.z), kw,
                                  scn.nr_config)
        report = estimate_with_variance(cohort, kw, rfit)
        kwnr = kwnr_weights(kw, rfit, cohort)

        y = cohort.y
        resp = cohort.respond_mask
        estimates = {
            "true_weighted": mean_weighted(y, draw.true_weights.values),
            "unweighted_c": float(y.mean()),
            "kw_c": mean_weighted(y, kw.values),
            "unweighted_r": float(y[resp].mean()),
            "kw_r": mean_weighted(y, kw.values, resp),
            "kwnr_r": report.estimate,
        }
        return RepRecord(
            rep_index=int(rep_index),
            truth=float(pop.y.mean()),
            response_rate=float(pop.respond.mean()),
            estimates=estimates,
            var_kwnr=report.var_total,
            var1=report.var1,
            var2=report.var2,
            cv_true=draw.true_weights.cv,
            cv_kw=kw.cv,
            cv_kwnr=kwnr.cv,
            n_resp=cohort.n_r,
        )
    except Exception as exc:  # recorded per replicate, surfaced in aggregate
        return RepRecord(rep_index=int(rep_index), failed=True,
                         error=f"{type(exc).__name__}: {exc}")


def _replicate_task(args):
    scn, rep_index = args
    return run_replicate(scn, rep_index)


def summarize(records) -> SimMetrics:
    """Aggregate replicate records into bias/variance/calibration metrics."""
    ok = [r for r in records if not r.failed]
    if len(ok) < 2:
        raise ValueError("need at least two successful replicates")
    truth = np.array([r.truth for r in ok])
    truth_mean = float(truth.mean())
    per = {}
    for key in ESTIMATORS:
        est = np.array([r.estimates[key] for r in ok])
        bias = float(est.mean()) - truth_mean
        emp_var = float(np.var(est, ddof=1))
        per[key] = EstimatorMetrics(
            rb_pct=100.0 * bias / truth_mean,
            emp_var=emp_var,
            mse=bias * bias + emp_var,
        )
    vr = float(np.mean([r.var_kwnr for r in ok])) / per["kwnr_r"].emp_var
    return SimMetrics(
        estimators=per,
        vr=vr,
        mean_cv_true=float(np.mean([r.cv_true for r in ok])),
        mean_cv_kw=float(np.mean([r.cv_kw for r in ok])),
        mean_cv_kwnr=float(np.mean([r.cv_kwnr for r in ok])),
        truth_mean=truth_mean,
        response_rate_mean=float(np.mean([r.response_rate for r in ok])),
        reps_done=len(ok),
        reps_failed=len(records) - len(ok),
    )


def run_monte_carlo(scn: SimScenario, *, threads=1,
                    progress=None) -> MonteCarloResult:
    """Run all replicates and aggregate; aborts past 1% failures.

    ``progress`` is an optional callback progress(done, total).
    """
    records = []
    if threads <= 1:
        for i in range(scn.reps):
            records.append(run_replicate(scn, i))
            if progress is not None:
                progress(len(records), scn.reps)
            # A systematically broken scenario fails every replicate; stop
            # early instead of grinding through the remainder.
            if len(records) == min(10, scn.reps) and all(
                    r.failed for r in records):
                samples = [(r.rep_index, r.error) for r in records[:5]]
                raise SimulationFailureError(len(records), scn.reps, samples)
    else:
        tasks = [(scn, i) for i in range(scn.reps)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rec in pool.map(_replicate_task, tasks, chunksize=8):
                records.append(rec)
                if progress is not None:
                    progress(len(records), scn.reps)
    records.sort(key=lambda r: r.rep_index)
    failed = [r for r in records if r.failed]
    if len(failed) / scn.reps > 0.01:
        samples = [(r.rep_index, r.error) for r in failed[:5]]
        raise SimulationFailureError(len(failed), scn.reps, samples)
    return MonteCarloResult(scenario=scn, metrics=summarize(records),
                            records=tuple(records))


def run_study(base: SimScenario, beta_c1_cells, *, threads=1, progress=None):
    """One result per participation-slope cell, sharing all other settings."""
    results = []
    for b1 in beta_c1_cells:
        scn = replace(base, beta_c=(base.beta_c[0], float(b1)))
        results.append((f"b_c1={b1:g}", run_monte_carlo(scn, threads=threads,
                                                        progress=progress)))
    return results


def _write_csv(path, header, rows, comment=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_table1_csv(path, cells, comment=None):
    """Estimator rows by cell columns: RB x 100, empVar x 1e4, MSE x 1e4."""
    header = ["estimator"]
    for label, _ in cells:
        header += [f"rb_pct[{label}]", f"emp_var_1e4[{label}]",
                   f"mse_1e4[{label}]"]
    rows = []
    for key in ESTIMATORS:
        row = [key]
        for _, res in cells:
            m = res.metrics.estimators[key]
            row += [fmt17(m.rb_pct), fmt17(m.emp_var * 1e4),
                    fmt17(m.mse * 1e4)]
        rows.append(row)
    _write_csv(path, header, rows, comment)


def write_table2_csv(path, cells, comment=None):
    """Variance-ratio and weight-dispersion summary per cell."""
    header = ["quantity"] + [label for label, _ in cells]
    quantities = [
        ("vr_kwnr", lambda m: m.vr),
        ("mean_cv_true", lambda m: m.mean_cv_true),
        ("mean_cv_kw", lambda m: m.mean_cv_kw),
        ("mean_cv_kwnr", lambda m: m.mean_cv_kwnr),
    ]
    rows = [[name] + [fmt17(get(res.metrics)) for _, res in cells]
            for name, get in quantities]
    _write_csv(path, header, rows, comment)


def write_replicates_csv(path, records, comment=None):
    header = (["rep", "failed", "error", "truth", "response_rate"]
              + [f"est_{k}" for k in ESTIMATORS]
              + ["var_kwnr", "var1", "var2",
                 "cv_true", "cv_kw", "cv_kwnr", "n_resp"])
    rows = []
    for r in records:
        est = [fmt17(r.estimates[k]) if r.estimates else "" for k in ESTIMATORS]
        rows.append([r.rep_index, int(r.failed), r.error,
                     fmt17(r.truth), fmt17(r.response_rate)]
                    + est
                    + [fmt17(r.var_kwnr), fmt17(r.var1), fmt17(r.var2),
                       fmt17(r.cv_true), fmt17(r.cv_kw), fmt17(r.cv_kwnr),
                       r.n_resp])
    _write_csv(path, header, rows, comment)


def metrics_as_dict(result: MonteCarloResult) -> dict:
    m = result.metrics
    return {
        "estimators": {
            key: {"rb_pct": em.rb_pct, "emp_var": em.emp_var, "mse": em.mse}
            for key, em in m.estimators.items()
        },
        "vr_kwnr": m.vr,
        "mean_cv_true": m.mean_cv_true,
        "mean_cv_kw": m.mean_cv_kw,
        "mean_cv_kwnr": m.mean_cv_kwnr,
        "truth_mean": m.truth_mean,
        "response_rate_mean": m.response_rate_mean,
        "reps_done": m.reps_done,
        "reps_failed": m.reps_failed,
        "scenario": {
            "N": result.scenario.N,
            "n_c": result.scenario.n_c,
            "n_s": result.scenario.n_s,
            "beta_y": list(result.scenario.beta_y),
            "beta_r": list(result.scenario.beta_r),
            "beta_c": list(result.scenario.beta_c),
            "reps": result.scenario.reps,
            "master_seed": result.scenario.master_seed,
            "fresh_population": result.scenario.fresh_population,
            "allow_certainty": result.scenario.allow_certainty,
            "pps_flavor": result.scenario.pps_flavor,
        },
    }


def write_metrics_json(path, cells, extra=None):
    payload = {"cells": {label: metrics_as_dict(res) for label, res in cells}}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
