import numpy as np
import pytest


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def unit_phases(rng, *shape):
    return np.exp(1j * rng.uniform(0, 2 * np.pi, shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
