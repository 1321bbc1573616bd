import numpy as np
import pytest


def random_spd(rng, k, shift=0.5):
    A = rng.standard_normal((k, k))
    return A @ A.T / k + shift * np.eye(k)


def random_psd(rng, k, rank):
    B = rng.standard_normal((k, rank))
    return B @ B.T


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
