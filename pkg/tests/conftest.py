import numpy as np
import pytest


def available_backends():
    names = []
    try:
        from gsavatar.rasterizer import _kernels  # noqa: F401
        names.append("compiled")
    except ImportError:
        pass
    names.append("python")
    return names


@pytest.fixture(params=available_backends())
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
