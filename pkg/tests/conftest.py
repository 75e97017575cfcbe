import numpy as np
import pytest

from factorprune import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    # numeric identity tests assume the default precision
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def safe_uniforms(rng, n, margin=0.05):
    """Uniforms away from 0/1 so finite differences never straddle the
    rectifier kink at the default stretch constants."""
    return rng.uniform(margin, 1.0 - margin, n)
