import numpy as np
import pytest

from easimix.model import Dimensions, EasiCoefficients, Observation


def random_coeffs(dims, rng, scale=0.05, symmetric=True):
    """Random reduced coefficients with interior-friendly intercepts."""
    s = dims.s
    b = rng.normal(0.0, scale, size=(dims.R + 1, s))
    b[0] = 1.0 / dims.S + rng.normal(0.0, scale, size=s)
    A = rng.normal(0.0, scale, size=(dims.M_p + 1, s, s))
    B = rng.normal(0.0, scale, size=(s, s))
    if symmetric:
        A = 0.5 * (A + np.transpose(A, (0, 2, 1)))
        B = 0.5 * (B + B.T)
    return EasiCoefficients(
        b=b,
        A=A,
        B=B,
        C=rng.normal(0.0, scale, size=(s, dims.M)),
        D=rng.normal(0.0, scale, size=(s, dims.M_y)),
        symmetric=symmetric,
    )


def random_observation(dims, rng, price_scale=0.3):
    """Random observation with simplex shares and exact relative prices."""
    w = rng.dirichlet(np.ones(dims.S))
    return Observation(
        shares=w,
        log_prices=rng.normal(0.0, price_scale, size=dims.S),
        log_expenditure=float(rng.normal(0.0, 0.5)),
        h=rng.normal(0.0, 1.0, size=dims.M),
        h_p=rng.normal(0.0, 1.0, size=dims.M_p),
        h_y=rng.normal(0.0, 1.0, size=dims.M_y),
        z=rng.normal(0.0, 1.0, size=dims.ell),
        weight=float(rng.uniform(0.5, 3.0)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)


@pytest.fixture
def small_dims():
    return Dimensions(S=3, R=1, M=0, M_p=0, M_y=0, ell=4, J=2)
