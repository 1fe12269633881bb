"""Variance-based sensitivity analysis for mediator missingness.

The complete-case pipeline estimates the indirect effect with weights built
from the intervention density fit on observed mediators.  When missingness
is informative those weights lose variance relative to the true ones; the
sensitivity parameter r2 caps how much.  This module builds the extremal
family of admissible weight perturbations, recomputes the indirect effect
under each member (inf/sup bounds), wraps the bounds in a stratified
bootstrap confidence interval, and sweeps either an r2 grid or a grid of
induced-missingness scenarios.

A perturbed weight vector implies a perturbed intervention density, so each
family member re-enters the pipeline in both places the density appears:
the targeting weights and the mediator-marginalization draws.  Perturbing
the weights alone is a no-op whenever the initial outcome fit already
solves the weighted score (the fluctuation intercept stays ~0 and the
downstream mean never sees the change).
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from ._utils import DENSITY_FLOOR, logit, sigmoid, subrng
from .dgp import MissingnessSpec, ObservationTable, apply_missingness
from .errors import (BootstrapError, ConfigurationError, DegenerateDensityError,
                     EstimationError, StratumError)
from .nuisance import NuisanceFit, fit_nuisances
from .tmle import (DEFAULT_TRUNCATION_QUANTILE, _weight_components,
                   solve_fluctuation, truncate_weights)

DEFAULT_FAMILY_POINTS = 21
BOOTSTRAP_FAMILY_POINTS = 7
BOOTSTRAP_N_MC = 250
BOOTSTRAP_N_BINS = 192
POINT_N_BINS = 1024
POINT_DENSITY_GRID = 1500
BOOTSTRAP_DENSITY_GRID = 300
DELTA_MAX = 2.0
N_DELTA_GRID = 41
MAX_REPLICATE_RETRIES = 10
R2_EMPIRICAL_CAP = 0.95


def thread_count():
    """Worker cap from MEDTRANSPORT_THREADS (0 or unset = auto)."""
    raw = os.environ.get("MEDTRANSPORT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"MEDTRANSPORT_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ConfigurationError("MEDTRANSPORT_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class SensitivityConfig:
    """Knobs of the sensitivity layer.

    ``lam`` is a diagnostic bound on per-row weight ratios, reported against
    the realized ratios of the family members rather than enforced.
    """

    r2_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    lam: Optional[float] = None
    alpha: float = 0.05
    n_bootstrap: int = 500
    seed: int = 0

    def validate(self):
        grid = tuple(self.r2_grid)
        if len(grid) == 0:
            raise ConfigurationError("r2_grid must be nonempty")
        if any(not 0.0 <= v < 1.0 for v in grid):
            raise ConfigurationError("r2_grid values must lie in [0, 1)")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigurationError("r2_grid must be strictly increasing")
        if self.lam is not None and self.lam < 1.0:
            raise ConfigurationError(f"lam must be >= 1, got {self.lam}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_bootstrap < 100:
            raise ConfigurationError("n_bootstrap must be >= 100")


@dataclass(frozen=True)
class CurveRow:
    group_w: int
    r2: float
    sie_lower: float
    sie_upper: float
    ci_low: float
    ci_high: float
    contains_null: bool


@dataclass(frozen=True)
class SensitivityCurve:
    rows: tuple

    def for_group(self, group_w):
        return [row for row in self.rows if row.group_w == group_w]

    def to_dataframe(self):
        return pd.DataFrame([{
            "group_w": row.group_w, "r2": row.r2,
            "sie_lower": row.sie_lower, "sie_upper": row.sie_upper,
            "ci_low": row.ci_low, "ci_high": row.ci_high,
            "contains_null": row.contains_null,
        } for row in self.rows])


@dataclass(frozen=True)
class NullCrossing:
    group_w: int
    r2_star: Optional[float]


def c_max_for(r2):
    if not 0.0 <= r2 < 1.0:
        raise ConfigurationError(f"r2 must lie in [0, 1), got {r2}")
    return 1.0 / np.sqrt(1.0 - r2)


def _family_member(base, mean, c):
    """One extremal perturbation: mean + c * (base - mean), clipped at zero
    and renormalized to preserve the mean.  c = 1 returns ``base`` itself."""
    if c == 1.0:
        return base, 0
    w = mean + c * (base - mean)
    n_clipped = int((w < 0.0).sum())
    if n_clipped:
        w = np.maximum(w, 0.0)
    w_mean = w.mean()
    if w_mean <= 0.0:
        raise DegenerateDensityError("perturbed weights collapsed to zero")
    return w * (mean / w_mean), n_clipped


def _member_grid(r2, n_points):
    """Scale factors covering [1, c_max], endpoints included."""
    return [float(c) for c in np.linspace(1.0, c_max_for(r2), n_points)]


@dataclass
class WeightFamily:
    """The extremal weight-perturbation family for one observed vector.

    Membership is indexed by a signed scale factor d with 1 <= |d| <= c_max;
    the endpoints realize the variance-ratio bound 1/(1 - r2) exactly until
    nonnegativity clipping activates.
    """

    base: np.ndarray
    r2: float
    n_points: int = DEFAULT_FAMILY_POINTS
    mean: float = field(init=False)
    c_max: float = field(init=False)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        if np.any(self.base < 0.0):
            raise ConfigurationError("observed weights must be nonnegative")
        if self.base.var() == 0.0:
            raise DegenerateDensityError("observed weights have zero variance")
        self.mean = float(self.base.mean())
        self.c_max = float(c_max_for(self.r2))

    def member(self, c):
        if not 1.0 <= c <= self.c_max + 1e-12:
            raise ConfigurationError(f"c must lie in [1, {self.c_max:.6g}], got {c}")
        return _family_member(self.base, self.mean, c)

    def grid(self):
        return _member_grid(self.r2, self.n_points)

    def variance_ratio(self, weights):
        return float(np.var(weights) / np.var(self.base))

    def ratio_range(self, weights):
        """Realized per-row ratio bounds (the Tan diagnostic)."""
        pos = self.base > 0.0
        ratios = weights[pos] / self.base[pos]
        return float(ratios.min()), float(ratios.max())


def sensitivity_bounds(weights_observed, r2) -> WeightFamily:
    """The extremal admissible perturbation family for a weight vector."""
    c_max_for(r2)  # domain check
    return WeightFamily(base=np.asarray(weights_observed, dtype=float), r2=r2)


def _bin_values(values, n_bins):
    """Compress a value vector to (per-bin means, bin mass).  Using within-bin
    means keeps the smooth-function averaging error second order in the bin
    width."""
    values = np.asarray(values, dtype=float)
    if len(values) <= n_bins:
        return values, np.full(len(values), 1.0 / len(values))
    edges = np.linspace(values.min(), values.max(), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=values, minlength=n_bins)
    keep = counts > 0
    return sums[keep] / counts[keep], counts[keep] / len(values)


@dataclass
class _ArmContext:
    """Precomputed pieces for one intervention arm (a, a_star)."""

    a: int
    a_star: int
    mult: np.ndarray          # weight multiplier K on source rows
    wbar: np.ndarray          # intervention density at observed mediators
    level: float              # mean of wbar, the family anchor
    src_offset: np.ndarray    # initial-fit logits on source rows
    src_y: np.ndarray
    c_src: np.ndarray         # observed mediator values on source rows
    w_src: np.ndarray
    dens_tables: dict         # per group: (value grid, tabulated density)
    strata: list              # (fraction, base means, base mass, draws, ghat)


class SensitivityAnalysis:
    """Bounded indirect-effect engine for one fitted pipeline and one group.

    Three member kinds span the sensitivity set.  Stretch members scale the
    weight deviations around their mean (the variance-ratio extremal ray)
    and are always active.  Shift and contrast members perturb only the
    share of the intervention density that the missing rows could have
    supplied: on a group with no missing mediators the estimated weights
    equal the true ones row by row, so the residual-variation set
    degenerates and both kinds are inert.  With missing fraction pi the
    member mixes (1-pi) of the fitted density with pi of a translated copy.
    Shift members translate both arms the same way (one biased mediator
    model feeds both intervention distributions); contrast members translate
    the arms toward (or away from) each other, the direction in which
    selection on the mediator attenuates the fitted arm separation and
    biases the indirect effect.  Admissibility is read off the perturbed
    weights themselves: a member stays in the set while its mixed weights
    keep cor^2 >= 1 - r2 with the observed ones, the regression reading of
    the residual-variation cap (which implies the variance-ratio display).

    Evaluations are cached with their admissibility level c, so bounds for
    a larger r2 always take their envelope over a superset of the members
    used for a smaller one; nesting along any increasing r2 path is
    structural.
    """

    def __init__(self, fit: NuisanceFit, table: ObservationTable, group_w=None,
                 truncation_quantile=DEFAULT_TRUNCATION_QUANTILE,
                 family_points=DEFAULT_FAMILY_POINTS, n_bins=POINT_N_BINS,
                 density_grid=POINT_DENSITY_GRID):
        self.fit = fit
        self.table = table
        self.group_w = group_w
        self.truncation_quantile = truncation_quantile
        self.family_points = family_points
        self.n_bins = n_bins
        self.density_grid = density_grid
        self.n_clipped = 0
        self.n_saturated = 0
        self.ratio_min = 1.0
        self.ratio_max = 1.0
        src = table.s == 1
        if group_w is not None:
            src = src & (table.w == group_w)
        self.pi_miss = float((table.m[src] == 0).mean()) if src.any() else 0.0
        self._arms = {a_star: self._build_arm(1, a_star) for a_star in (1, 0)}
        sep = (self._arm_level(self._arms[1]) - self._arm_level(self._arms[0]))
        self._sep_sign = 1.0 if sep >= 0 else -1.0
        self._cor_maps = {sign: self._build_cor_map(sign) for sign in (1, -1)}
        self._evals = {}

    @staticmethod
    def _arm_level(arm):
        return sum(frac * draws.mean() for frac, _, _, draws, _ in arm.strata)

    def _build_arm(self, a, a_star):
        fit, table = self.fit, self.table
        mask, mult, wbar = _weight_components(fit, table, a, a_star)
        if not mask.any():
            raise StratumError("no source rows with observed mediator in this arm")
        src_rows = pd.DataFrame({
            "A": table.a[mask].astype(float), "C": table.c_obs[mask],
            "R": table.r[mask], "W": table.w[mask].astype(float),
        })
        src_offset = logit(fit.outcome_model.predict_proba(src_rows))
        src_y = table.y[mask].astype(float)
        c_src = table.c_obs[mask]
        w_src = table.w[mask]

        tgt_mask = table.s == 0
        if self.group_w is not None:
            tgt_mask = tgt_mask & (table.w == self.group_w)
        if not tgt_mask.any():
            raise StratumError(f"empty target stratum (group_w={self.group_w})")
        coefs = dict(zip(("intercept",) + fit.outcome_model.predictor_columns,
                         fit.outcome_model.coefficients))
        self._bc = coefs["C"]
        tgt_r = table.r[tgt_mask]
        tgt_w = table.w[tgt_mask]

        dens_tables = {}
        lo = float(c_src.min()) - DELTA_MAX - 0.5
        hi = float(c_src.max()) + DELTA_MAX + 0.5
        grid = np.linspace(lo, hi, self.density_grid)
        for wv in np.unique(w_src):
            gstar = fit.gstar(a_star, 0, int(wv))
            if gstar.kind != "continuous":
                raise ConfigurationError(
                    "sensitivity bounds require a continuous mediator model")
            dens_tables[int(wv)] = (grid, gstar.density(grid))

        strata = []
        for wv in np.unique(tgt_w):
            sel = tgt_w == wv
            base = (coefs["intercept"] + coefs["A"] * a + coefs["R"] * tgt_r[sel]
                    + coefs["W"] * wv)
            means, mass = _bin_values(base, self.n_bins)
            gstar = fit.gstar(a_star, 0, int(wv))
            ghat = gstar.density(gstar.draws)
            strata.append((float(sel.mean()), means, mass, gstar.draws, ghat))
        return _ArmContext(a=a, a_star=a_star, mult=mult, wbar=wbar,
                           level=float(wbar.mean()), src_offset=src_offset,
                           src_y=src_y, c_src=c_src, w_src=w_src,
                           dens_tables=dens_tables, strata=strata)

    def _shifted_density(self, arm, delta):
        out = np.empty(len(arm.c_src))
        for wv, (grid, dens) in arm.dens_tables.items():
            sel = arm.w_src == wv
            out[sel] = np.interp(arm.c_src[sel] - delta, grid, dens)
        return np.maximum(out, DENSITY_FLOOR)

    def _build_cor_map(self, sign):
        """Correlation between perturbed and observed intervention weights as
        a function of the shift size, tabulated on this group's rows.  The
        perturbed weights are the missing-share mixture the shift and
        contrast members actually use."""
        arm = self._arms[1]
        rows = np.ones(len(arm.c_src), dtype=bool) if self.group_w is None \
            else arm.w_src == self.group_w
        if not rows.any():
            raise StratumError(f"no source rows in group {self.group_w}")
        base = self._shifted_density(arm, 0.0)[rows]
        if base.std() == 0.0:
            raise DegenerateDensityError("observed weights have zero variance")
        deltas = np.linspace(0.0, DELTA_MAX, N_DELTA_GRID)
        cors = np.empty(N_DELTA_GRID)
        for k, d in enumerate(deltas):
            shifted = self._shifted_density(arm, sign * d)[rows]
            mixed = (1.0 - self.pi_miss) * base + self.pi_miss * shifted
            sd = mixed.std()
            cors[k] = float(np.corrcoef(mixed, base)[0, 1]) if sd > 0 else 0.0
        # admissibility uses the running envelope so the map is invertible
        cors = np.minimum.accumulate(np.clip(cors, -1.0, 1.0))
        return deltas, cors

    def _delta_for(self, c, sign):
        """Largest shift whose mixed weights stay cor^2 >= 1/c^2 with the
        observed ones; saturates at the tabulated range."""
        deltas, cors = self._cor_maps[sign]
        rho_target = 1.0 / c
        if rho_target <= cors[-1]:
            self.n_saturated += 1
            return float(deltas[-1])
        return float(np.interp(-rho_target, -cors, deltas))

    def _eps_for(self, arm, weights):
        h, _ = truncate_weights(arm.mult * weights, self.truncation_quantile)
        return solve_fluctuation(arm.src_offset, arm.src_y, h)

    def _psi_stretch(self, arm: _ArmContext, c):
        weights, n_clipped = _family_member(arm.wbar, arm.level, c)
        self.n_clipped += n_clipped
        if c != 1.0:
            pos = arm.wbar > 0.0
            ratios = weights[pos] / arm.wbar[pos]
            self.ratio_min = min(self.ratio_min, float(ratios.min()))
            self.ratio_max = max(self.ratio_max, float(ratios.max()))
        eps = self._eps_for(arm, weights)

        psi = 0.0
        for frac, means, mass, draws, ghat in arm.strata:
            if c == 1.0:
                omega = np.full(len(draws), 1.0 / len(draws))
            else:
                # density ratio of the perturbed intervention at its own draws
                omega = np.maximum(c + (1.0 - c) * arm.level / ghat, 0.0)
                total = omega.sum()
                if total <= 0.0:
                    raise DegenerateDensityError(
                        "perturbed intervention density vanished on all draws")
                omega = omega / total
            vals = sigmoid((means + eps)[:, None] + self._bc * draws[None, :])
            psi += frac * float(mass @ (vals @ omega))
        return psi

    def _psi_contrast(self, arm: _ArmContext, delta):
        pi = self.pi_miss
        base = self._shifted_density(arm, 0.0)
        shifted = self._shifted_density(arm, delta)
        eps = self._eps_for(arm, (1.0 - pi) * base + pi * shifted)
        psi = 0.0
        for frac, means, mass, draws, ghat in arm.strata:
            logits = (means + eps)[:, None]
            vals = ((1.0 - pi) * sigmoid(logits + self._bc * draws[None, :])
                    + pi * sigmoid(logits + self._bc * (draws + delta)[None, :]))
            psi += frac * float(mass @ vals.mean(axis=1))
        return psi

    def _sie_eval(self, key):
        kind, c, sign = key
        if kind == "stretch":
            return (self._psi_stretch(self._arms[1], c)
                    - self._psi_stretch(self._arms[0], c))
        if self.pi_miss == 0.0:
            return self.baseline_sie()
        if kind == "contrast":
            # sign +1 pulls the arms together, -1 pushes them apart
            d1 = -sign * self._sep_sign
            delta1 = d1 * self._delta_for(c, 1 if d1 > 0 else -1)
            delta0 = -d1 * self._delta_for(c, 1 if d1 < 0 else -1)
            return (self._psi_contrast(self._arms[1], delta1)
                    - self._psi_contrast(self._arms[0], delta0))
        delta = sign * self._delta_for(c, sign)
        return (self._psi_contrast(self._arms[1], delta)
                - self._psi_contrast(self._arms[0], delta))

    def sie_member(self, kind, c, sign=1):
        key = (kind, float(c), int(sign))
        if key not in self._evals:
            self._evals[key] = self._sie_eval(key)
        return self._evals[key]

    def baseline_sie(self):
        return self.sie_member("stretch", 1.0)

    def bounds(self, r2):
        """(inf, sup) of the indirect effect over the r2 sensitivity set."""
        base = self.baseline_sie()
        if r2 == 0.0:
            return base, base
        for c in _member_grid(r2, self.family_points):
            self.sie_member("stretch", c)
            if c > 1.0:
                self.sie_member("shift", c, 1)
                self.sie_member("shift", c, -1)
                self.sie_member("contrast", c, 1)
                self.sie_member("contrast", c, -1)
        c_max = c_max_for(r2)
        vals = [v for (kind, c, sign), v in self._evals.items()
                if c <= c_max + 1e-12]
        return min(vals), max(vals)

    def diagnostics(self, lam=None):
        out = {"n_clipped": self.n_clipped, "n_saturated": self.n_saturated,
               "ratio_min": self.ratio_min, "ratio_max": self.ratio_max}
        if lam is not None:
            out["within_tan_bound"] = bool(
                self.ratio_max <= lam and self.ratio_min >= 1.0 / lam)
        return out


def bounded_sie(fit, table, group_w, r2,
                truncation_quantile=DEFAULT_TRUNCATION_QUANTILE):
    """(inf, sup) of the indirect effect over the r2 sensitivity set."""
    engine = SensitivityAnalysis(fit, table, group_w,
                                 truncation_quantile=truncation_quantile)
    return engine.bounds(r2)


def _default_fit_factory(fit: NuisanceFit, n_mc=None):
    ridge = fit.outcome_model.ridge
    n_mc = fit.n_mc if n_mc is None else n_mc

    def factory(tbl):
        return fit_nuisances(tbl, mediator_binary=fit.mediator_binary,
                             ridge=ridge, n_mc=n_mc, seed=fit.seed)
    return factory


def _stratified_resample(table: ObservationTable, rng) -> ObservationTable:
    """Resample rows with replacement within each (S, W) cell."""
    idx_parts = []
    for sv in np.unique(table.s):
        for wv in np.unique(table.w):
            cell = np.flatnonzero((table.s == sv) & (table.w == wv))
            if len(cell):
                idx_parts.append(rng.choice(cell, size=len(cell), replace=True))
    idx = np.concatenate(idx_parts)
    resampled = table.subset(idx)
    return ObservationTable(
        ids=np.arange(resampled.n), s=resampled.s.copy(), a=resampled.a.copy(),
        w=resampled.w.copy(), r=resampled.r.copy(), c_obs=resampled.c_obs.copy(),
        m=resampled.m.copy(), y=resampled.y.copy(),
        c_true=None if resampled.c_true is None else resampled.c_true.copy(),
    )


def _replicate_envelopes(fit_factory, table, targets, seed, b,
                         truncation_quantile, family_points):
    """One bootstrap replicate: per (group, r2 list) target, the per-r2
    running envelope of the indirect effect over the member grid."""
    last_err = None
    for retry in range(MAX_REPLICATE_RETRIES):
        rng = subrng(seed, 100, b, retry)
        table_b = _stratified_resample(table, rng)
        try:
            fit_b = fit_factory(table_b)
            out = []
            for group_w, r2_list in targets:
                engine = SensitivityAnalysis(
                    fit_b, table_b, group_w,
                    truncation_quantile=truncation_quantile,
                    family_points=family_points, n_bins=BOOTSTRAP_N_BINS,
                    density_grid=BOOTSTRAP_DENSITY_GRID)
                pairs = []
                for r2 in r2_list:
                    lo, hi = engine.bounds(r2)
                    pairs.append((lo, hi))
                out.append(pairs)
            return out
        except EstimationError as exc:
            last_err = exc
    raise BootstrapError(
        f"bootstrap replicate {b} failed after {MAX_REPLICATE_RETRIES} retries") from last_err


def _bootstrap_cis(fit_factory, table, targets, config,
                   truncation_quantile, family_points=BOOTSTRAP_FAMILY_POINTS):
    """Stratified bootstrap CI endpoints for every (group, r2) target.

    Returns, per target, a list of (ci_low, ci_high) aligned with its r2
    list: the alpha/2 quantile of replicate infima and the 1 - alpha/2
    quantile of replicate suprema.
    """
    n_b = config.n_bootstrap

    def one(b):
        return _replicate_envelopes(fit_factory, table, targets, config.seed, b,
                                    truncation_quantile, family_points)

    workers = thread_count()
    if workers > 1:
        # numpy kernels release the GIL, so threads overlap usefully
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_b)))
    else:
        results = [one(b) for b in range(n_b)]
    out = []
    for t_idx, (_, r2_list) in enumerate(targets):
        cis = []
        for r_idx in range(len(r2_list)):
            infs = np.array([results[b][t_idx][r_idx][0] for b in range(n_b)])
            sups = np.array([results[b][t_idx][r_idx][1] for b in range(n_b)])
            cis.append((float(np.quantile(infs, config.alpha / 2.0)),
                        float(np.quantile(sups, 1.0 - config.alpha / 2.0))))
        out.append(cis)
    return out


def ci_alpha(fit, table, group_w, r2, config: SensitivityConfig,
             fit_factory=None, truncation_quantile=DEFAULT_TRUNCATION_QUANTILE):
    """Bootstrap confidence interval around the r2 sensitivity bounds."""
    config.validate()
    c_max_for(r2)
    if fit_factory is None:
        fit_factory = _default_fit_factory(fit, n_mc=min(fit.n_mc, BOOTSTRAP_N_MC))
    cis = _bootstrap_cis(fit_factory, table, [(group_w, [r2])], config,
                         truncation_quantile)
    return cis[0][0]


def empirical_r2(fit_masked, fit_full, table_masked, table_full, group_w,
                 a=1, a_star=1):
    """Residual weight-variation fraction induced by the missingness.

    Evaluates the intervention weights of the complete-case fit and of the
    full-data fit at the true mediator values of every source row in the
    group's treatment arm, and reports the fraction of the true weights'
    variation the complete-case weights fail to explain: 1 - cor^2.
    """
    if table_full.c_true is None:
        raise ConfigurationError(
            "empirical r2 needs true mediator values; pass an r2 grid instead")
    mask = ((table_full.s == 1) & (table_full.a == a)
            & (table_full.w == group_w))
    if not mask.any():
        raise StratumError(f"no source rows in group {group_w}")
    c_true = table_full.c_true[mask]
    w_star = fit_full.gstar(a_star, 0, group_w).density(c_true)
    w_bar = fit_masked.gstar(a_star, 0, group_w).density(c_true)
    if float(np.std(w_star)) <= 0.0 or float(np.std(w_bar)) <= 0.0:
        raise DegenerateDensityError("intervention weights have zero variance")
    rho = float(np.corrcoef(w_bar, w_star)[0, 1])
    return float(np.clip(1.0 - rho * rho, 0.0, R2_EMPIRICAL_CAP))


def _null_crossings(rows_by_group):
    out = []
    for group_w, rows in rows_by_group.items():
        r2_star = None
        for row in rows:
            if row.contains_null:
                r2_star = row.r2
                break
        out.append(NullCrossing(group_w=group_w, r2_star=r2_star))
    return out


def _make_row(group_w, r2, lo, hi, ci_lo, ci_hi):
    # percentile endpoints cannot sit inside the point bounds they cover
    ci_lo = min(ci_lo, lo)
    ci_hi = max(ci_hi, hi)
    return CurveRow(group_w=group_w, r2=float(r2), sie_lower=float(lo),
                    sie_upper=float(hi), ci_low=float(ci_lo), ci_high=float(ci_hi),
                    contains_null=bool(ci_lo <= 0.0 <= ci_hi))


def sweep(fit_factory, table, grid, config: SensitivityConfig, groups=(0, 1),
          truncation_quantile=DEFAULT_TRUNCATION_QUANTILE):
    """Sensitivity curve over an r2 grid or a list of missingness scenarios.

    r2 grid: one fit, one engine per group, one shared bootstrap pass.
    Missingness scenarios: each is applied to the table, refit, converted to
    an empirical r2 per group, then bounded at that r2.  Returns the curve,
    one null crossing per group, and a diagnostics dict.
    """
    config.validate()
    grid = list(grid)
    if len(grid) == 0:
        raise ConfigurationError("sweep grid must be nonempty")
    missingness_mode = isinstance(grid[0], MissingnessSpec)
    if missingness_mode:
        return _sweep_missingness(fit_factory, table, grid, config, groups,
                                  truncation_quantile)
    return _sweep_r2(fit_factory, table, [float(v) for v in grid], config,
                     groups, truncation_quantile)


def _sweep_r2(fit_factory, table, r2_grid, config, groups, truncation_quantile):
    if any(b <= a for a, b in zip(r2_grid, r2_grid[1:])):
        raise ConfigurationError("r2 grid must be strictly increasing")
    for r2 in r2_grid:
        c_max_for(r2)
    fit = fit_factory(table)
    targets = [(g, r2_grid) for g in groups]
    cis = _bootstrap_cis(fit_factory, table, targets, config, truncation_quantile)

    rows_by_group = {}
    diagnostics = {}
    for t_idx, group_w in enumerate(groups):
        engine = SensitivityAnalysis(fit, table, group_w,
                                     truncation_quantile=truncation_quantile)
        rows = []
        for r_idx, r2 in enumerate(r2_grid):
            lo, hi = engine.bounds(r2)
            ci_lo, ci_hi = cis[t_idx][r_idx]
            rows.append(_make_row(group_w, r2, lo, hi, ci_lo, ci_hi))
        rows_by_group[group_w] = rows
        diagnostics[f"group_{group_w}"] = engine.diagnostics(config.lam)

    curve = SensitivityCurve(rows=tuple(
        row for g in groups for row in rows_by_group[g]))
    return curve, _null_crossings(rows_by_group), diagnostics


def _sweep_missingness(fit_factory, table, specs, config, groups,
                       truncation_quantile):
    if table.c_true is None:
        raise ConfigurationError(
            "missingness sweep needs simulated data with true mediator values; "
            "pass an r2 grid for external data")
    fit_full = fit_factory(table)
    rows_by_group = {g: [] for g in groups}
    diagnostics = {"realized_missing": [], "empirical_r2": []}
    for i, spec in enumerate(specs):
        point_seed = int(np.random.SeedSequence((config.seed, 200, i)).generate_state(1)[0])
        masked = apply_missingness(table, spec, seed=point_seed)
        fit_m = fit_factory(masked)
        elig = masked.w == spec.target_group if spec.target_group is not None \
            else np.ones(masked.n, dtype=bool)
        diagnostics["realized_missing"].append(float((masked.m[elig] == 0).mean()))

        r2s = {g: empirical_r2(fit_m, fit_full, masked, table, g) for g in groups}
        diagnostics["empirical_r2"].append({g: r2s[g] for g in groups})
        targets = [(g, [r2s[g]]) for g in groups]
        cis = _bootstrap_cis(fit_factory, masked, targets, config,
                             truncation_quantile)
        for t_idx, group_w in enumerate(groups):
            engine = SensitivityAnalysis(fit_m, masked, group_w,
                                         truncation_quantile=truncation_quantile)
            lo, hi = engine.bounds(r2s[group_w])
            ci_lo, ci_hi = cis[t_idx][0]
            rows_by_group[group_w].append(
                _make_row(group_w, r2s[group_w], lo, hi, ci_lo, ci_hi))

    curve = SensitivityCurve(rows=tuple(
        row for g in groups for row in rows_by_group[g]))
    return curve, _null_crossings(rows_by_group), diagnostics
