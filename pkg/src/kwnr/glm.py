"""Weighted binary-logistic fitting by Newton-Raphson with step-halving.

One solver serves both propensity models: baseline participation (cohort
stacked over the design-weighted reference sample) and follow-up response.
"""

from dataclasses import dataclass, field

import numpy as np

from .data_model import CohortSample, ReferenceSample

# probability clamp: floor protects logs and divisions, ceiling keeps
# fitted values strictly below 1
_P_LO = 1e-12
_P_HI = float(np.nextafter(1.0, 0.0))

_MAX_ITER = 25
_SCORE_TOL = 1e-8
_COEF_BOUND = 30.0


class FitError(Exception):
    """Logistic fit could not produce a usable solution."""


class SeparationError(FitError):
    """Diverging coefficients: data are (quasi-)completely separated."""


class ConvergenceError(FitError):
    def __init__(self, message, score_norm):
        super().__init__(message)
        self.score_norm = score_norm


def expit(t):
    """1 / (1 + exp(-t)), overflow-safe, clamped away from exact 0 and 1."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    out = np.clip(out, _P_LO, _P_HI)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DesignSpec:
    """Covariate expansion g(x): identity columns plus intercept by default."""

    interactions: bool = False
    squares: bool = False

    def expand(self, x, labels=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, k = x.shape
        if labels is None:
            labels = [f"x{j + 1}" for j in range(k)]
        cols = [np.ones(n)]
        names = ["intercept"]
        for j in range(k):
            cols.append(x[:, j])
            names.append(labels[j])
        if self.squares:
            for j in range(k):
                cols.append(x[:, j] ** 2)
                names.append(f"{labels[j]}^2")
        if self.interactions:
            for a in range(k):
                for b in range(a + 1, k):
                    cols.append(x[:, a] * x[:, b])
                    names.append(f"{labels[a]}:{labels[b]}")
        return DesignMatrix(np.column_stack(cols), tuple(names))


@dataclass(frozen=True)
class DesignMatrix:
    """n x p model matrix with a single all-ones intercept column."""

    matrix: np.ndarray
    labels: tuple

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if not np.all(np.isfinite(m)):
            raise ValueError("design matrix entries must be finite")
        ones = [j for j in range(m.shape[1]) if np.all(m[:, j] == 1.0)]
        if len(ones) != 1:
            raise ValueError("design matrix needs exactly one intercept column of 1s")
        zero = [j for j in range(m.shape[1]) if np.all(m[:, j] == 0.0)]
        if zero:
            raise ValueError(f"design matrix column {zero[0]} is constant zero")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def shape(self):
        return self.matrix.shape


@dataclass(frozen=True)
class PropensityFit:
    """Fitted logistic coefficients with diagnostics.

    ``info_matrix`` is sum_i w_i p_i (1 - p_i) x_i x_i^T at the solution
    (the pseudo-information matrix when weights are pseudoweights).
    """

    coefficients: np.ndarray
    fitted: np.ndarray
    info_matrix: np.ndarray
    converged: bool
    iterations: int
    max_score_norm: float
    labels: tuple = ()
    loglik_path: tuple = field(default=(), repr=False)

    def linear_predictor(self, X):
        m = X.matrix if isinstance(X, DesignMatrix) else np.atleast_2d(X)
        if m.shape[1] != self.coefficients.shape[0]:
            raise ValueError(
                f"design has {m.shape[1]} columns, fit has "
                f"{self.coefficients.shape[0]} coefficients"
            )
        return m @ self.coefficients

    def standard_errors(self):
        return np.sqrt(np.diag(np.linalg.inv(self.info_matrix)))


def weighted_loglik(X, y, w, beta):
    """Weighted (pseudo-)log-likelihood of a logistic model."""
    m = X.matrix if isinstance(X, DesignMatrix) else X
    p = expit(m @ beta)
    return float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def fit_weighted_logistic(X, outcome, weights, *, tol=_SCORE_TOL,
                          max_iter=_MAX_ITER):
    """Solve the weighted score equation sum_i w_i (y_i - p_i) x_i = 0.

    Newton-Raphson with step-halving; convergence is declared on the score
    sup-norm relative to 1 + ||sum_i w_i x_i||_inf.
    """
    if isinstance(X, DesignMatrix):
        m, labels = X.matrix, X.labels
    else:
        m = np.atleast_2d(np.asarray(X, dtype=float))
        labels = tuple(f"c{j}" for j in range(m.shape[1]))
    y = np.asarray(outcome, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    n, p = m.shape
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError("outcome/weights length must match design rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("outcome must be binary 0/1")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be nonnegative and finite")
    active = w > 0
    if not (np.any(y[active] == 1.0) and np.any(y[active] == 0.0)):
        raise ValueError("need both outcome classes among positively weighted rows")

    score_scale = 1.0 + np.max(np.abs(m.T @ w))
    beta = np.zeros(p)
    ll = weighted_loglik(m, y, w, beta)
    ll_path = [ll]
    snorm = np.inf
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        prob = expit(m @ beta)
        score = m.T @ (w * (y - prob))
        snorm = float(np.max(np.abs(score)))
        if snorm < tol * score_scale:
            converged = True
            break
        info = (m * (w * prob * (1.0 - prob))[:, None]).T @ m
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular information matrix") from exc

        t, accepted = 1.0, False
        for _ in range(30):
            cand = beta + t * step
            ll_new = weighted_loglik(m, y, w, cand)
            if ll_new >= ll:
                beta, ll, accepted = cand, ll_new, True
                break
            t *= 0.5
        if not accepted:
            break
        ll_path.append(ll)
        if np.linalg.norm(beta) > _COEF_BOUND:
            raise SeparationError(
                f"coefficient norm {np.linalg.norm(beta):.2f} exceeds "
                f"{_COEF_BOUND}: quasi-complete separation"
            )
    else:
        prob = expit(m @ beta)
        score = m.T @ (w * (y - prob))
        snorm = float(np.max(np.abs(score)))
        converged = snorm < tol * score_scale

    if not converged:
        raise ConvergenceError(
            f"no convergence after {iterations} iterations "
            f"(score sup-norm {snorm:.3e})",
            score_norm=snorm,
        )

    prob = expit(m @ beta)
    info = (m * (w * prob * (1.0 - prob))[:, None]).T @ m
    return PropensityFit(
        coefficients=beta,
        fitted=prob,
        info_matrix=info,
        converged=True,
        iterations=iterations,
        max_score_norm=snorm,
        labels=labels,
        loglik_path=tuple(ll_path),
    )


def participation_fit(cohort: CohortSample, reference: ReferenceSample,
                      design: DesignSpec | None = None):
    """Fit the baseline participation model on the combined cohort + reference.

    Cohort units enter with label 1 and unit weight; reference units with
    label 0 and their design weights.  The linear predictor of the returned
    fit supplies balancing scores.
    """
    design = design or DesignSpec()
    if cohort.x.shape[1] != reference.x.shape[1]:
        raise ValueError(
            f"cohort has {cohort.x.shape[1]} x-columns, "
            f"reference has {reference.x.shape[1]}"
        )
    stacked = np.vstack([cohort.x, reference.x])
    X = design.expand(stacked)
    label = np.concatenate([np.ones(cohort.n_c), np.zeros(reference.n_s)])
    w = np.concatenate([np.ones(cohort.n_c), reference.d])
    return fit_weighted_logistic(X, label, w)


def balancing_scores(fit: PropensityFit, X):
    """Full linear predictor a + B'g(x).

    Matching uses score differences, so the constant intercept term cancels;
    it is kept so scores are directly comparable across samples.
    """
    if not fit.converged:
        raise FitError("balancing scores require a converged fit")
    return fit.linear_predictor(X)
