"""Synthetic data generation, mediator missingness mechanisms, and the
Monte-Carlo ground-truth oracle.

The structural model is the fixed seven-node graph used throughout the
package: environment indicator S shifts the group indicator W; treatment A
drives an intermediate R; the mediator C depends on R and W; the binary
outcome Y follows a logistic model in (A, C, W).  Missingness acts only on
the mediator proxy.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from ._utils import sigmoid, subrng
from .errors import CalibrationError, ConfigurationError


@dataclass(frozen=True)
class StructuralParams:
    """Coefficients of the structural equations.

    Defaults are the canonical simulation constants used by the test suite.
    """

    p_treat: float = 0.5
    w_source_shift: float = 0.5
    w_noise_sd: float = 0.1
    coef_r_given_a: float = 0.7
    coef_c_given_r: float = 1.5
    coef_c_given_w1: float = 0.2
    coef_c_given_w0: float = 0.8
    outcome_coef_a: float = 0.2
    outcome_coef_c: float = 2.5
    outcome_coef_w: float = -0.7
    noise_sd_r: float = 0.5
    noise_sd_c: float = 0.5

    def validate(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value):
                raise ConfigurationError(f"non-finite structural parameter: {name}={value}")
        if not 0.0 <= self.p_treat <= 1.0:
            raise ConfigurationError(f"p_treat must lie in [0, 1], got {self.p_treat}")
        for name in ("w_noise_sd", "noise_sd_r", "noise_sd_c"):
            if getattr(self, name) < 0.0:
                raise ConfigurationError(f"{name} must be nonnegative")


class Mechanism(str, Enum):
    MCAR = "mcar"
    MAR = "mar"
    MNAR = "mnar"


@dataclass(frozen=True)
class MissingnessSpec:
    """How mediator values are removed.

    ``lam`` is the slope of the dependence of the missingness indicator on
    its parents (ignored for MCAR, where ``target_proportion`` is the
    Bernoulli rate).  When ``target_proportion`` is set, an intercept shift
    is calibrated so the realized missing fraction in the target group
    matches it to within ``CALIBRATION_TOL``.  ``target_group`` restricts
    missingness to rows with that W value; ``None`` exposes every row.
    """

    mechanism: Mechanism = Mechanism.MNAR
    lam: float = -1.0  # negative: low mediator values go missing, which biases the indirect effect toward null
    target_group: Optional[int] = 0
    target_proportion: Optional[float] = None

    def validate(self):
        if self.target_proportion is not None and not 0.0 <= self.target_proportion <= 1.0:
            raise ConfigurationError(
                f"target_proportion must lie in [0, 1], got {self.target_proportion}")
        if self.mechanism is Mechanism.MCAR and self.target_proportion is None:
            raise ConfigurationError("MCAR requires target_proportion (the Bernoulli rate)")
        if self.target_group not in (None, 0, 1):
            raise ConfigurationError(f"target_group must be 0, 1, or None, got {self.target_group}")


CALIBRATION_TOL = 0.005


@dataclass(frozen=True)
class ObservationTable:
    """One row per individual; immutable column arrays.

    ``c_obs`` is NaN exactly where ``m == 0``.  ``c_true`` is only available
    for simulated data and is ``None`` when loading external files.
    """

    ids: np.ndarray
    s: np.ndarray
    a: np.ndarray
    w: np.ndarray
    r: np.ndarray
    c_obs: np.ndarray
    m: np.ndarray
    y: np.ndarray
    c_true: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("ids", "s", "a", "w", "r", "c_obs", "m", "y", "c_true"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        n = self.n
        for name in ("s", "a", "w", "r", "c_obs", "m", "y"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"column {name} has wrong length")
        if not np.array_equal(np.isnan(self.c_obs), self.m == 0):
            raise ConfigurationError("c_obs must be NaN exactly where m == 0")

    @property
    def n(self):
        return len(self.ids)

    def to_dataframe(self, keep_truth=False):
        cols = {
            "id": self.ids, "S": self.s, "A": self.a, "W": self.w,
            "R": self.r, "C": self.c_obs, "Y": self.y,
        }
        if keep_truth and self.c_true is not None:
            cols["C_TRUE"] = self.c_true
        return pd.DataFrame(cols)

    def subset(self, mask):
        return ObservationTable(
            ids=self.ids[mask].copy(), s=self.s[mask].copy(), a=self.a[mask].copy(),
            w=self.w[mask].copy(), r=self.r[mask].copy(), c_obs=self.c_obs[mask].copy(),
            m=self.m[mask].copy(), y=self.y[mask].copy(),
            c_true=None if self.c_true is None else self.c_true[mask].copy(),
        )


def generate(params: StructuralParams, n_source: int, n_target: int, seed: int) -> ObservationTable:
    """Sample a fresh table: ``n_source`` rows with S=1 then ``n_target`` with S=0.

    No missingness is applied; every row has m=1 and c_obs == c_true.  The
    Bernoulli argument of the W equation is clamped to [0, 1] (the raw
    equation can leave the unit interval).
    """
    params.validate()
    if n_source < 1 or n_target < 1:
        raise ConfigurationError("n_source and n_target must be >= 1")
    rng = subrng(seed, 0)
    n = n_source + n_target
    s = np.concatenate([np.ones(n_source, dtype=int), np.zeros(n_target, dtype=int)])
    a = (rng.random(n) < params.p_treat).astype(int)
    p_w = np.clip(params.w_source_shift * s + rng.normal(0.0, params.w_noise_sd, n), 0.0, 1.0)
    w = (rng.random(n) < p_w).astype(int)
    r = params.coef_r_given_a * a + rng.normal(0.0, params.noise_sd_r, n)
    c = (params.coef_c_given_r * r
         + params.coef_c_given_w1 * w
         + params.coef_c_given_w0 * (1 - w)
         + rng.normal(0.0, params.noise_sd_c, n))
    eta = params.outcome_coef_a * a + params.outcome_coef_c * c + params.outcome_coef_w * w
    y = (rng.random(n) < sigmoid(eta)).astype(int)
    return ObservationTable(
        ids=np.arange(n), s=s, a=a, w=w, r=r,
        c_obs=c.copy(), m=np.ones(n, dtype=int), y=y, c_true=c,
    )


def _missing_score(table, spec):
    """Per-row linear score whose sigmoid is the missingness probability."""
    if spec.mechanism is Mechanism.MAR:
        return table.a + table.r
    c = table.c_true if table.c_true is not None else table.c_obs
    return c


def _eligible_mask(table, spec):
    mask = table.m == 1  # already-missing rows stay missing
    if spec.target_group is not None:
        mask &= table.w == spec.target_group
    return mask


def apply_missingness(table: ObservationTable, spec: MissingnessSpec, seed: int) -> ObservationTable:
    """Return a copy of ``table`` with the missingness mechanism applied.

    MCAR draws Bernoulli(target_proportion) independently; MAR scores rows by
    lam * (A + R); MNAR scores rows by lam times the mediator itself.  When
    ``target_proportion`` is set for MAR/MNAR, an intercept shift is
    calibrated by bisection on the realized missing fraction (shared uniform
    draws).  Keeping the slope fixed preserves the mechanism's direction at
    every requested proportion; calibrating the slope instead would delete
    low-score rows at small proportions and high-score rows at large ones.
    """
    spec.validate()
    eligible = _eligible_mask(table, spec)
    n_elig = int(eligible.sum())
    rng = subrng(seed, 1)
    u = rng.random(table.n)

    if spec.target_proportion is not None and n_elig == 0:
        raise CalibrationError("cannot calibrate missingness: target group is empty")

    if spec.mechanism is Mechanism.MCAR:
        missing = eligible & (u < spec.target_proportion)
    else:
        score = spec.lam * np.asarray(_missing_score(table, spec), dtype=float)
        if np.isnan(score[eligible]).any():
            raise CalibrationError("missingness score requires observed mediator values")

        def realized(shift):
            miss = eligible & (u < sigmoid(shift + score))
            return miss, miss.sum() / n_elig

        if spec.target_proportion is None:
            missing, _ = realized(0.0)
        else:
            p = spec.target_proportion
            span = float(np.abs(score[eligible]).max()) + 40.0
            shift = _bisect(lambda v: realized(v)[1], -span, span, p)
            if shift is None:
                raise CalibrationError(
                    f"could not reach missing fraction {p} in the target group")
            missing, frac = realized(shift)
            if abs(frac - p) > CALIBRATION_TOL:
                raise CalibrationError(
                    f"calibrated missing fraction {frac:.4f} misses target {p:.4f}")

    m = np.where(missing, 0, table.m)
    c_obs = np.where(missing, np.nan, table.c_obs)
    return ObservationTable(
        ids=table.ids.copy(), s=table.s.copy(), a=table.a.copy(), w=table.w.copy(),
        r=table.r.copy(), c_obs=c_obs, m=m, y=table.y.copy(),
        c_true=None if table.c_true is None else table.c_true.copy(),
    )


def _bisect(f, lo, hi, target, tol=CALIBRATION_TOL, max_iter=60):
    """Bisection on a (nearly) monotone realized-fraction function.

    Returns the located argument, or None when ``target`` is outside the
    bracket's range.
    """
    f_lo, f_hi = f(lo), f(hi)
    increasing = f_hi >= f_lo
    lo_val, hi_val = (f_lo, f_hi) if increasing else (f_hi, f_lo)
    if not lo_val - tol <= target <= hi_val + tol:
        return None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid - target) <= tol * 0.5:
            return mid
        if (f_mid < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class OracleEffects:
    """Monte-Carlo ground truth for the stochastic effects, per W group."""

    sde: dict
    sie: dict
    sde_se: dict
    sie_se: dict
    n_mc: int

    def as_dict(self):
        return {
            "sde": {str(k): v for k, v in self.sde.items()},
            "sie": {str(k): v for k, v in self.sie.items()},
            "sde_se": {str(k): v for k, v in self.sde_se.items()},
            "sie_se": {str(k): v for k, v in self.sie_se.items()},
            "n_mc": self.n_mc,
        }


def oracle_effects(params: StructuralParams, n_mc: int, seed: int) -> OracleEffects:
    """Brute-force truth for the conditional stochastic direct/indirect effects.

    For each group w and each (a, a*) contrast arm, draws the mediator from
    its structural conditional under treatment level a* and averages the
    outcome probability under treatment a.  Independent of the estimation
    pipeline by construction.
    """
    params.validate()
    if n_mc < 10**5:
        raise ConfigurationError("oracle requires n_mc >= 1e5")

    def arm(a, a_star, w, rng):
        r = params.coef_r_given_a * a_star + rng.normal(0.0, params.noise_sd_r, n_mc)
        c = (params.coef_c_given_r * r
             + params.coef_c_given_w1 * w
             + params.coef_c_given_w0 * (1 - w)
             + rng.normal(0.0, params.noise_sd_c, n_mc))
        p = sigmoid(params.outcome_coef_a * a + params.outcome_coef_c * c
                    + params.outcome_coef_w * w)
        return p.mean(), p.std(ddof=1) / np.sqrt(n_mc)

    sde, sie, sde_se, sie_se = {}, {}, {}, {}
    for w in (0, 1):
        rng = subrng(seed, 2, w)
        p10, se10 = arm(1, 0, w, rng)
        p00, se00 = arm(0, 0, w, rng)
        p11, se11 = arm(1, 1, w, rng)
        sde[w] = p10 - p00
        sie[w] = p11 - p10
        sde_se[w] = float(np.hypot(se10, se00))
        sie_se[w] = float(np.hypot(se11, se10))
    return OracleEffects(sde=sde, sie=sie, sde_se=sde_se, sie_se=sie_se, n_mc=n_mc)
