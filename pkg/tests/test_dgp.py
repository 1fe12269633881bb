import numpy as np
import pytest

from medtransport import (CalibrationError, ConfigurationError, Mechanism,
                          MissingnessSpec, StructuralParams,
                          apply_missingness, generate, oracle_effects)
from medtransport.dgp import CALIBRATION_TOL

from conftest import ORACLE_SDE, ORACLE_SIE


def test_generate_shapes_and_environments(params):
    table = generate(params, n_source=300, n_target=200, seed=0)
    assert table.n == 500
    assert int(table.s.sum()) == 300
    assert set(np.unique(table.a)) <= {0, 1}
    assert set(np.unique(table.w)) <= {0, 1}
    assert set(np.unique(table.y)) <= {0, 1}
    # no missingness at generation time
    assert table.m.all()
    assert np.array_equal(table.c_obs, table.c_true)


def test_generate_deterministic(params):
    t1 = generate(params, n_source=200, n_target=200, seed=9)
    t2 = generate(params, n_source=200, n_target=200, seed=9)
    assert np.array_equal(t1.c_true, t2.c_true)
    assert np.array_equal(t1.y, t2.y)
    t3 = generate(params, n_source=200, n_target=200, seed=10)
    assert not np.array_equal(t1.c_true, t3.c_true)


def test_environment_shifts_group_composition(params):
    table = generate(params, n_source=4000, n_target=4000, seed=1)
    # W depends on S, so the group mix differs between environments
    w_src = table.w[table.s == 1].mean()
    w_tgt = table.w[table.s == 0].mean()
    assert w_src > w_tgt + 0.3


def test_invalid_params_rejected():
    with pytest.raises(ConfigurationError):
        generate(StructuralParams(p_treat=1.5), 100, 100, seed=0)
    with pytest.raises(ConfigurationError):
        generate(StructuralParams(noise_sd_c=-1.0), 100, 100, seed=0)
    with pytest.raises(ConfigurationError):
        generate(StructuralParams(), 0, 100, seed=0)


def test_mnar_calibrated_proportion(params):
    table = generate(params, n_source=5000, n_target=5000, seed=3)
    spec = MissingnessSpec(mechanism=Mechanism.MNAR, target_group=0,
                           target_proportion=0.3)
    masked = apply_missingness(table, spec, seed=42)
    frac_w0 = (masked.m[masked.w == 0] == 0).mean()
    frac_w1 = (masked.m[masked.w == 1] == 0).mean()
    assert 0.3 - CALIBRATION_TOL <= frac_w0 <= 0.3 + CALIBRATION_TOL
    assert frac_w1 == 0.0


def test_mcar_rate_and_untargeted(params):
    table = generate(params, n_source=5000, n_target=5000, seed=3)
    spec = MissingnessSpec(mechanism=Mechanism.MCAR, target_group=None,
                           target_proportion=0.2)
    masked = apply_missingness(table, spec, seed=0)
    assert abs((masked.m == 0).mean() - 0.2) < 0.02


def test_missingness_preserves_already_missing(params):
    table = generate(params, n_source=2000, n_target=2000, seed=5)
    first = apply_missingness(
        table, MissingnessSpec(mechanism=Mechanism.MCAR, target_group=None,
                               target_proportion=0.2), seed=1)
    second = apply_missingness(
        first, MissingnessSpec(mechanism=Mechanism.MNAR, target_group=0,
                               target_proportion=0.5), seed=2)
    assert not (first.m == 0)[second.m == 1].any()
    assert np.array_equal(np.isnan(second.c_obs), second.m == 0)


def test_missingness_deterministic(params):
    table = generate(params, n_source=2000, n_target=2000, seed=5)
    spec = MissingnessSpec(mechanism=Mechanism.MNAR, target_group=0,
                           target_proportion=0.4)
    m1 = apply_missingness(table, spec, seed=7)
    m2 = apply_missingness(table, spec, seed=7)
    assert np.array_equal(m1.m, m2.m)


def test_mar_depends_on_observables_not_mediator(params):
    # MAR missingness must be flat in C once A and R are controlled; compare
    # mediator distributions of missing vs observed within an (A, R)-slice.
    table = generate(params, n_source=20000, n_target=1000, seed=6)
    spec = MissingnessSpec(mechanism=Mechanism.MAR, target_group=None,
                           target_proportion=0.4, lam=1.0)
    masked = apply_missingness(table, spec, seed=8)
    sel = (table.s == 1) & (table.a == 1) & (np.abs(table.r - 0.7) < 0.1)
    c_missing = table.c_true[sel & (masked.m == 0)]
    c_observed = table.c_true[sel & (masked.m == 1)]
    assert abs(c_missing.mean() - c_observed.mean()) < 0.1


def test_mnar_targets_low_mediator_values(params):
    table = generate(params, n_source=20000, n_target=1000, seed=6)
    spec = MissingnessSpec(mechanism=Mechanism.MNAR, target_group=0,
                           target_proportion=0.4)
    masked = apply_missingness(table, spec, seed=8)
    w0 = table.w == 0
    c_missing = table.c_true[w0 & (masked.m == 0)]
    c_observed = table.c_true[w0 & (masked.m == 1)]
    assert c_missing.mean() < c_observed.mean() - 0.2


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        MissingnessSpec(target_proportion=1.2).validate()
    with pytest.raises(ConfigurationError):
        MissingnessSpec(mechanism=Mechanism.MCAR).validate()
    with pytest.raises(ConfigurationError):
        MissingnessSpec(target_group=2).validate()


def test_oracle_matches_frozen_values(params):
    truth = oracle_effects(params, n_mc=10**6, seed=7)
    for g in (0, 1):
        assert truth.sie[g] == pytest.approx(ORACLE_SIE[g], abs=1e-12)
        assert truth.sde[g] == pytest.approx(ORACLE_SDE[g], abs=1e-12)
        assert truth.sie_se[g] < 0.005
        assert truth.sde_se[g] < 0.005


def test_oracle_zero_mediation(params):
    flat = StructuralParams(outcome_coef_c=0.0)
    truth = oracle_effects(flat, n_mc=10**5, seed=2)
    for g in (0, 1):
        assert abs(truth.sie[g]) < 3 * truth.sie_se[g] + 1e-6


def test_oracle_consistency_under_doubling(params):
    small = oracle_effects(params, n_mc=2 * 10**5, seed=13)
    large = oracle_effects(params, n_mc=4 * 10**5, seed=14)
    for g in (0, 1):
        combined = np.hypot(small.sie_se[g], large.sie_se[g])
        assert abs(small.sie[g] - large.sie[g]) < 3 * combined


@pytest.mark.xfail(
    strict=True,
    reason="the indirect effect is only group-homogeneous for a linear "
    "outcome; with the logistic outcome used here the two groups sit on "
    "different parts of the link and the oracle gap (~0.15) dwarfs the "
    "Monte-Carlo error")
def test_oracle_group_homogeneity(params):
    truth = oracle_effects(params, n_mc=10**6, seed=7)
    combined = np.hypot(truth.sie_se[0], truth.sie_se[1])
    assert abs(truth.sie[0] - truth.sie[1]) < 2 * combined
