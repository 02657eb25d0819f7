import math

import numpy as np
import pytest

from src.components.model import ExactDyadic, FloatBeta, GOLDEN_MEAN, make_params

# t with t² = 1/2.
T_HALF = math.sqrt(0.5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def half_params():
    """t² = 0.5, β = 1, θ = 0.3, λ = π/3."""
    return make_params(t=T_HALF, theta=0.3, lam=math.pi / 3, beta=ExactDyadic(1))


@pytest.fixture
def golden_params():
    return make_params(
        t=T_HALF, theta=0.7, lam=math.pi / 3, beta=FloatBeta(GOLDEN_MEAN)
    )


def random_params(rng: np.random.Generator, exact: bool = True):
    """Random parameters with t away from 0 and 1."""
    if exact:
        beta = ExactDyadic(int(rng.integers(0, 1 << 30)), 30)
    else:
        beta = FloatBeta(float(rng.uniform(0.0, 1.0)))
    return make_params(
        t=float(rng.uniform(0.05, 0.95)),
        alpha=float(rng.uniform(0.0, 2 * math.pi)),
        theta=float(rng.uniform(0.0, 2 * math.pi)),
        lam=float(rng.uniform(0.0, 2 * math.pi)),
        beta=beta,
    )
