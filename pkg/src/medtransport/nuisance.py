"""Conditional models consumed by the targeting step: a from-scratch IRLS
logistic regression, linear-Gaussian conditionals, and the stochastic
mediator-intervention distribution built from them.

All models touching the mediator are fit on complete cases only.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import norm

from ._utils import DENSITY_FLOOR, normal_pdf, sigmoid, subrng
from .errors import (ConfigurationError, DegenerateDensityError, SeparationError,
                     SingularDesignError, StratumError)

SCORE_TOL = 1e-8
MAX_IRLS_ITER = 100


def _design(rows: pd.DataFrame, predictor_columns):
    X = np.column_stack([np.ones(len(rows))] +
                        [np.asarray(rows[c], dtype=float) for c in predictor_columns])
    if not np.isfinite(X).all():
        raise ConfigurationError("non-finite values in predictors")
    return X


@dataclass
class LogisticFit:
    """Maximum-likelihood (optionally ridge) logistic regression."""

    coefficients: np.ndarray
    predictor_columns: tuple
    converged: bool
    n_iterations: int
    deviance: float
    ridge: float = 0.0

    def linear_predictor(self, rows):
        return _design(rows, self.predictor_columns) @ self.coefficients

    def predict_proba(self, rows):
        return sigmoid(self.linear_predictor(rows))


def fit_logistic(rows, outcome_column, predictor_columns, ridge=0.0) -> LogisticFit:
    """IRLS (Newton) fit; converges when every score component is < 1e-8.

    A ridge penalty (not applied to the intercept) is the recommended remedy
    for separation; without one, a diverging fit raises ``SeparationError``.
    """
    y = np.asarray(rows[outcome_column], dtype=float)
    if len(np.unique(y)) < 2:
        raise SeparationError(
            f"outcome column {outcome_column!r} is constant; cannot fit logistic model")
    X = _design(rows, predictor_columns)
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError("rank-deficient design matrix in logistic fit")

    penalty = np.full(p, ridge)
    penalty[0] = 0.0  # intercept unpenalized
    beta = np.zeros(p)
    converged = False
    for it in range(1, MAX_IRLS_ITER + 1):
        mu = sigmoid(X @ beta)
        score = X.T @ (y - mu) - penalty * beta
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        wts = np.clip(mu * (1.0 - mu), 1e-10, None)
        hess = (X * wts[:, None]).T @ X + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError("singular Hessian in logistic fit") from exc
        beta = beta + step
        if np.max(np.abs(beta)) > 1e3 and ridge == 0.0:
            raise SeparationError(
                "logistic fit is diverging (likely separation); refit with ridge > 0")
    it_count = it
    if not converged:
        raise SeparationError(
            "logistic fit did not converge in "
            f"{MAX_IRLS_ITER} iterations; consider ridge > 0")
    mu = np.clip(sigmoid(X @ beta), 1e-12, 1 - 1e-12)
    deviance = -2.0 * float(np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu)))
    return LogisticFit(coefficients=beta, predictor_columns=tuple(predictor_columns),
                       converged=converged, n_iterations=it_count,
                       deviance=deviance, ridge=ridge)


@dataclass
class GaussianConditionalFit:
    """OLS mean with homoscedastic Gaussian residuals."""

    coefficients: np.ndarray
    predictor_columns: tuple
    residual_sd: float

    def mean(self, rows):
        return _design(rows, self.predictor_columns) @ self.coefficients

    def density(self, values, rows):
        if self.residual_sd <= 0.0:
            raise DegenerateDensityError("residual_sd is zero; conditional density is degenerate")
        return normal_pdf(np.asarray(values, dtype=float), self.mean(rows), self.residual_sd)

    def sample(self, rows, rng):
        if self.residual_sd <= 0.0:
            raise DegenerateDensityError("residual_sd is zero; cannot sample")
        mu = self.mean(rows)
        return mu + rng.normal(0.0, self.residual_sd, len(mu))


def fit_gaussian_conditional(rows, target_column, predictor_columns) -> GaussianConditionalFit:
    """Least squares plus residual SD (denominator n - p - 1)."""
    y = np.asarray(rows[target_column], dtype=float)
    X = _design(rows, predictor_columns)
    n, p = X.shape
    if n < p + 1:
        raise SingularDesignError(f"need at least {p + 1} rows to fit {p} coefficients")
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError("rank-deficient design matrix in Gaussian conditional fit")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(n - p, 1)
    residual_sd = float(np.sqrt(resid @ resid / dof))
    return GaussianConditionalFit(coefficients=beta, predictor_columns=tuple(predictor_columns),
                                  residual_sd=residual_sd)


@dataclass
class GStarDistribution:
    """The stochastic mediator-intervention distribution for one (a*, s, w).

    Continuous mediators carry a seeded Monte-Carlo representation (draws of
    the intermediate, then the mediator); binary mediators carry an exact
    two-point mass.  ``density`` evaluates the implied mixture density at
    arbitrary mediator values.
    """

    a_star: int
    s: int
    w: int
    kind: str  # "continuous" or "binary"
    draws: Optional[np.ndarray] = None          # mediator draws (continuous)
    r_draws: Optional[np.ndarray] = None
    mean_given_r: Optional[np.ndarray] = None   # conditional means at each r draw
    sd: Optional[float] = None
    probs: Optional[np.ndarray] = None          # P(C=0), P(C=1) (binary)

    def density(self, values):
        values = np.asarray(values, dtype=float)
        if self.kind == "binary":
            out = np.where(values >= 0.5, self.probs[1], self.probs[0])
            return np.maximum(out, DENSITY_FLOOR)
        # mixture over the intermediate draws
        dens = normal_pdf(values[:, None], self.mean_given_r[None, :], self.sd).mean(axis=1)
        return np.maximum(dens, DENSITY_FLOOR)

    def mean(self):
        if self.kind == "binary":
            return float(self.probs[1])
        return float(self.draws.mean())


@dataclass
class NuisanceFit:
    """Everything the targeting step needs, fit on the strata it prescribes.

    Outcome model: source complete cases.  Mediator and intermediate models:
    per environment (mediator models on complete cases).  Marginals:
    empirical.
    """

    outcome_model: LogisticFit
    mediator_source: object
    mediator_target: object
    intermediate_source: GaussianConditionalFit
    intermediate_target: GaussianConditionalFit
    treatment_marginal: float
    selection_marginal: float
    mediator_binary: bool
    n_mc: int
    seed: int
    _gstar_cache: dict = field(default_factory=dict, repr=False)

    def gstar(self, a_star, s, w) -> GStarDistribution:
        key = (int(a_star), int(s), int(w))
        if key not in self._gstar_cache:
            self._gstar_cache[key] = mediator_intervention_density(self, *key)
        return self._gstar_cache[key]


OUTCOME_PREDICTORS = ("A", "C", "R", "W")
MEDIATOR_PREDICTORS = ("A", "R", "W")
INTERMEDIATE_PREDICTORS = ("A",)


def fit_nuisances(table, mediator_binary=False, ridge=0.0, n_mc=1000, seed=0) -> NuisanceFit:
    """Fit all conditional models from an observation table."""
    df = table.to_dataframe()
    df["C"] = table.c_obs
    src = df[df["S"] == 1]
    tgt = df[df["S"] == 0]
    if len(src) == 0 or len(tgt) == 0:
        raise StratumError("both environments (S=1 and S=0) must be present")
    src_cc = src[src["C"].notna()]
    tgt_cc = tgt[tgt["C"].notna()]
    if len(src_cc) == 0 or len(tgt_cc) == 0:
        raise StratumError("no complete cases in one environment")

    outcome_model = fit_logistic(src_cc, "Y", OUTCOME_PREDICTORS, ridge=ridge)
    if mediator_binary:
        mediator_source = fit_logistic(src_cc, "C", MEDIATOR_PREDICTORS, ridge=ridge)
        mediator_target = fit_logistic(tgt_cc, "C", MEDIATOR_PREDICTORS, ridge=ridge)
    else:
        mediator_source = fit_gaussian_conditional(src_cc, "C", MEDIATOR_PREDICTORS)
        mediator_target = fit_gaussian_conditional(tgt_cc, "C", MEDIATOR_PREDICTORS)
    intermediate_source = fit_gaussian_conditional(src, "R", INTERMEDIATE_PREDICTORS)
    intermediate_target = fit_gaussian_conditional(tgt, "R", INTERMEDIATE_PREDICTORS)

    return NuisanceFit(
        outcome_model=outcome_model,
        mediator_source=mediator_source,
        mediator_target=mediator_target,
        intermediate_source=intermediate_source,
        intermediate_target=intermediate_target,
        treatment_marginal=float(np.clip(src["A"].mean(), 1e-6, 1 - 1e-6)),
        selection_marginal=float(np.clip((df["S"] == 0).mean(), 1e-6, 1 - 1e-6)),
        mediator_binary=mediator_binary,
        n_mc=int(n_mc),
        seed=int(seed),
    )


def _lhs_normal(rng, n):
    """Stratified (Latin-hypercube) standard-normal draws.

    Unbiased like plain Monte Carlo but with far lower integration noise for
    the smooth integrands the pipeline averages.
    """
    u = (rng.permutation(n) + rng.random(n)) / n
    return norm.ppf(u)


def mediator_intervention_density(fit: NuisanceFit, a_star, s, w) -> GStarDistribution:
    """Build the intervention distribution: draw the intermediate under
    treatment a*, then the mediator given it, within environment s and
    group w."""
    mediator = fit.mediator_source if s == 1 else fit.mediator_target
    intermediate = fit.intermediate_source if s == 1 else fit.intermediate_target
    rng = subrng(fit.seed, 10, a_star, s, w)
    r_rows = pd.DataFrame({"A": np.full(fit.n_mc, a_star, dtype=float)})
    if intermediate.residual_sd <= 0.0:
        raise DegenerateDensityError("intermediate model has zero residual_sd")
    r_draws = intermediate.mean(r_rows) + intermediate.residual_sd * _lhs_normal(rng, fit.n_mc)
    c_rows = pd.DataFrame({
        "A": np.full(fit.n_mc, a_star, dtype=float),
        "R": r_draws,
        "W": np.full(fit.n_mc, w, dtype=float),
    })
    if fit.mediator_binary:
        p1 = float(mediator.predict_proba(c_rows).mean())
        return GStarDistribution(a_star=a_star, s=s, w=w, kind="binary",
                                 probs=np.array([1.0 - p1, p1]))
    mu = mediator.mean(c_rows)
    if mediator.residual_sd <= 0.0:
        raise DegenerateDensityError("mediator model has zero residual_sd")
    draws = mu + mediator.residual_sd * _lhs_normal(rng, fit.n_mc)
    return GStarDistribution(a_star=a_star, s=s, w=w, kind="continuous",
                             draws=draws, r_draws=r_draws, mean_given_r=mu,
                             sd=mediator.residual_sd)
