"""Small numeric helpers used throughout the package."""

import numpy as np

DENSITY_FLOOR = 1e-300
PROB_CLIP = 1e-12


def sigmoid(x):
    # exp overflow for very negative x still yields the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), PROB_CLIP, 1.0 - PROB_CLIP)
    return np.log(p / (1.0 - p))


def subrng(seed, *key):
    """Deterministic child RNG derived from a master seed and an integer key path."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def normal_pdf(x, mean, sd):
    z = (x - mean) / sd
    return np.exp(-0.5 * z * z) / (sd * np.sqrt(2.0 * np.pi))
