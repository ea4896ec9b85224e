import numpy as np
import pytest


@pytest.fixture
def rng():
    """Oracle-side randomness, independent of the package's own PRNG."""
    return np.random.default_rng(20240817)
