import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plcapf import kernels
from plcapf.model import TemplateDictionary

# examples are drawn deterministically so Monte Carlo checks cannot flake
settings.register_profile(
    "repo",
    derandomize=True,
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param) as impl:
        yield request.param, impl


@pytest.fixture
def tiny_dictionary():
    """Two pitches, one mode, shifts -1..1, disjoint supports inside 12 bins."""
    t = np.zeros((2, 1, 12))
    t[0, 0, 2:5] = [0.25, 0.5, 0.25]
    t[1, 0, 7:10] = [0.2, 0.6, 0.2]
    return TemplateDictionary(t, (-1, 0, 1))

