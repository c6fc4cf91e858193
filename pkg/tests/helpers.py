"""Shared test utilities."""

import numpy as np


def monte_carlo_ok(samples, expected, n_se=3.0):
    """Mean of ``samples`` within ``n_se`` standard errors of ``expected``."""
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1, axis=0) / np.sqrt(len(samples))
    return np.all(np.abs(samples.mean(axis=0) - expected) <= n_se * se + 1e-12)
