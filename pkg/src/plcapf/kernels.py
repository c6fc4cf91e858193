"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used.  Setting ``PLCAPF_PURE_PYTHON=1`` forces the fallback.
"""

import importlib
import os
from contextlib import contextmanager

import numpy as np

from plcapf import _pykernels

BACKENDS = ("cython", "python")


def load_backend(name: str):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("plcapf._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")


def available_backends() -> list[str]:
    found = []
    for name in BACKENDS:
        try:
            load_backend(name)
        except ImportError:
            continue
        found.append(name)
    return found


if os.environ.get("PLCAPF_PURE_PYTHON", "") not in ("", "0"):
    _impl, BACKEND = _pykernels, "python"
else:
    try:
        _impl, BACKEND = load_backend("cython"), "cython"
    except ImportError:
        _impl, BACKEND = _pykernels, "python"


@contextmanager
def use_backend(name: str):
    """Temporarily route every kernel call through backend ``name``."""
    global _impl, BACKEND
    saved = _impl, BACKEND
    _impl, BACKEND = load_backend(name), name
    try:
        yield _impl
    finally:
        _impl, BACKEND = saved


def _c(a):
    return np.ascontiguousarray(a, dtype=float)


def reconstruct(weights, basis):
    """Batched reconstruction: (N, K) mixture weights times (K, F) basis."""
    return _impl.reconstruct(_c(weights), _c(basis))


def mixture_loglik(weights, basis, observed, sigma):
    """Per-row Gaussian log-density of ``observed`` given ``weights @ basis``."""
    return _impl.mixture_loglik(_c(weights), _c(basis), _c(observed), float(sigma))


def cdf_traverse(cdf, positions):
    """Index of the first CDF entry at or above each (sorted) position."""
    return _impl.cdf_traverse(_c(cdf), _c(positions))
