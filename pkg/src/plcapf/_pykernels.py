"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def reconstruct(weights, basis):
    return np.asarray(weights) @ np.asarray(basis)


def mixture_loglik(weights, basis, observed, sigma):
    resid = np.asarray(observed) - np.asarray(weights) @ np.asarray(basis)
    n_f = resid.shape[-1]
    const = -0.5 * n_f * np.log(2.0 * np.pi * sigma * sigma)
    return const - np.einsum("nf,nf->n", resid, resid) / (2.0 * sigma * sigma)


def cdf_traverse(cdf, positions):
    idx = np.searchsorted(cdf, positions, side="left")
    return np.minimum(idx, len(cdf) - 1).astype(np.intp)
