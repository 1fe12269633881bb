import numpy as np
import pytest

from medtransport import StructuralParams, fit_nuisances, generate

# Frozen Monte-Carlo ground truth for the default structural parameters,
# computed once with oracle_effects(StructuralParams(), n_mc=10**6, seed=7).
# Oracle standard errors are all below 5e-4.
ORACLE_SDE = {0: 0.021613124730683886, 1: 0.028425587713596767}
ORACLE_SIE = {0: 0.17270501354931533, 1: 0.32135244127337537}


@pytest.fixture(scope="session")
def params():
    return StructuralParams()


@pytest.fixture(scope="session")
def table5000(params):
    return generate(params, n_source=5000, n_target=5000, seed=11)


@pytest.fixture(scope="session")
def fit5000(table5000):
    return fit_nuisances(table5000, seed=11)


@pytest.fixture(scope="session")
def table_small(params):
    return generate(params, n_source=1500, n_target=1500, seed=4)


@pytest.fixture(scope="session")
def fit_small(table_small):
    return fit_nuisances(table_small, seed=4)
