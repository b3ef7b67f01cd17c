"""Shared fixtures built on sketchforge.synthetic."""

import numpy as np
import pytest

from sketchforge import synthetic, tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def extractor():
    return synthetic.small_extractor(seed=0)


@pytest.fixture(scope="session")
def face_pairs():
    return synthetic.reference_pairs(5, (64, 64), seed=0)


@pytest.fixture(scope="session")
def distinct_pairs():
    return synthetic.reference_pairs(5, (64, 64), seed=10, distinct=True)


@pytest.fixture
def float64():
    """Run a test with float64 as the default dtype."""
    previous = np.dtype(tensor.get_default_dtype()).name
    tensor.set_default_dtype("float64")
    yield
    tensor.set_default_dtype(previous)
