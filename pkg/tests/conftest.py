import numpy as np
import pytest

from contraction_kit._backend import available_backends, get_kernels


@pytest.fixture(params=available_backends())
def kernels(request):
    """Run kernel-level tests against every backend built in this env."""
    return get_kernels(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)
