"""Shared fixtures: small windows at h = 1 and moderate quadrature orders."""

import numpy as np
import pytest

from phi4ce.covariance import KernelParams
from phi4ce.gaussian import CovarianceMatrix, GaussianIntegrator, Grid
from phi4ce.ksolver import KSConfig
from phi4ce.model import LatticeModel, ModelParams

TEST_ORDER = 12


@pytest.fixture
def kernel_params():
    return KernelParams(1)


@pytest.fixture
def grid4():
    return Grid.window(0.0, 3.0, 1.0)


@pytest.fixture
def base4(grid4):
    return CovarianceMatrix.from_kernel(grid4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_model():
    def build(coupling, window=(0.0, 3.0), h=1.0, method="tensor", order=TEST_ORDER, samples=200_000, seed=0):
        integrator = GaussianIntegrator(method, order=order, samples=samples, seed=seed)
        return LatticeModel(ModelParams.build(coupling, window, h), integrator)
    return build


@pytest.fixture
def make_ks():
    def build(coupling, window=(0.0, 3.0), h=1.0, **kwargs):
        kwargs.setdefault("quadrature_order", TEST_ORDER)
        return KSConfig(coupling=coupling, h=h, window=window, **kwargs)
    return build
