"""
Tests for the regularized covariance: direct quadrature comparisons, the
known full Green's functions and the e^{-2r} decay certificate.
"""

import math

import numpy as np
import pytest
from scipy import integrate

from phi4ce.covariance import (KernelParams, covariance, covariance_matrix, covariance_table, decay_constant,
                               exponential_integral_constant, full_covariance, full_kernel_closed_form, kernel,
                               psd_check, shell_kernel_bound_check)
from phi4ce.errors import CapabilityError, DomainError, SingularityError

RTOL = 1e-12
FULL_RTOL = 1e-8


def direct_kernel(r, d):
    value, _ = integrate.quad(lambda a: a ** (-0.5 * d) * math.exp(-a - r * r / (4 * a)), 0.5, 1.0,
                              epsabs=0.0, epsrel=1e-14)
    return value * (4 * math.pi) ** (-0.5 * d)


class TestKernel:
    @pytest.mark.parametrize("d", [1, 2])
    @pytest.mark.parametrize("r", [0.0, 0.5, 1.0, 3.0, 7.0])
    def test_matches_direct_quadrature(self, d, r):
        np.testing.assert_allclose(kernel(r, KernelParams(d)), direct_kernel(r, d), rtol=RTOL)

    def test_positive_and_decreasing(self, kernel_params):
        values = kernel(np.linspace(0.0, 10.0, 101), kernel_params)
        assert np.all(values > 0)
        assert np.all(np.diff(values) < 0)

    def test_symmetric(self, kernel_params):
        assert covariance(0.3, 2.1, kernel_params) == covariance(2.1, 0.3, kernel_params)

    def test_translation_invariant(self):
        p = KernelParams(2)
        a = covariance([0.0, 0.0], [1.0, 2.0], p)
        b = covariance([5.0, -1.0], [6.0, 1.0], p)
        np.testing.assert_allclose(a, b, rtol=1e-15)

    def test_value_at_origin(self, kernel_params):
        np.testing.assert_allclose(kernel(0.0, kernel_params), 0.0800, atol=5e-4)

    def test_rejects_non_finite(self, kernel_params):
        with pytest.raises(DomainError):
            kernel(float("nan"), kernel_params)
        with pytest.raises(DomainError):
            covariance([0.0, float("inf")], [0.0, 0.0], KernelParams(2))

    def test_unsupported_parameters(self):
        with pytest.raises(CapabilityError):
            KernelParams(dimension=3)
        with pytest.raises(DomainError):
            KernelParams(quadrature_order=4)
        with pytest.raises(DomainError):
            KernelParams(alpha_lo=0.25)


class TestFullCovariance:
    @pytest.mark.parametrize("r", [0.0, 0.5, 1.0, 3.0])
    def test_one_dimension(self, r):
        np.testing.assert_allclose(full_covariance(0.0, r, d=1), 0.5 * math.exp(-r), rtol=FULL_RTOL)

    @pytest.mark.parametrize("r", [0.5, 1.0, 3.0])
    def test_two_dimensions(self, r):
        np.testing.assert_allclose(full_covariance([0.0, 0.0], [r, 0.0], d=2), full_kernel_closed_form(r, 2),
                                   rtol=FULL_RTOL)

    def test_coincident_points_in_two_dimensions(self):
        with pytest.raises(SingularityError):
            full_covariance([1.0, 1.0], [1.0, 1.0], d=2)

    def test_regularized_is_smaller(self, kernel_params):
        for r in (0.0, 1.0, 2.0):
            assert kernel(r, kernel_params) < full_covariance(0.0, r, d=1)


class TestDecayCertificate:
    def test_holds(self, kernel_params):
        cert = decay_constant(kernel_params)
        assert cert.holds
        assert cert.max_violation == 0.0
        assert cert.drift < 1e-2
        assert cert.c1 >= kernel(0.0, kernel_params)
        assert cert.refined_c1 >= cert.c1 * (1 - 1e-12)

    def test_two_dimensions(self):
        assert decay_constant(KernelParams(2)).holds

    def test_short_range_rejected(self, kernel_params):
        with pytest.raises(DomainError):
            decay_constant(kernel_params, r_max=5.0)

    def test_shell_bound(self, kernel_params):
        cert = decay_constant(kernel_params)
        sites = np.arange(0.0, 6.5, 0.5)
        ratio = shell_kernel_bound_check(cert, kernel_params, np.array([0.0, 2.0, 4.5]), sites)
        assert 0.0 < ratio <= 1.0 + 1e-6


class TestMatrices:
    def test_psd_on_random_points(self, rng):
        assert psd_check(rng.uniform(0.0, 10.0, size=30), KernelParams(1)) >= -1e-10
        assert psd_check(rng.uniform(0.0, 5.0, size=(25, 2)), KernelParams(2)) >= -1e-10

    def test_matrix_entries(self, kernel_params):
        m = covariance_matrix([0.0, 1.0, 3.0], kernel_params)
        np.testing.assert_allclose(m, m.T)
        np.testing.assert_allclose(m[0, 2], kernel(3.0, kernel_params), rtol=RTOL)

    def test_dimension_mismatch(self, kernel_params):
        with pytest.raises(DomainError):
            covariance_matrix(np.zeros((3, 2)), kernel_params)

    def test_too_many_points(self, kernel_params):
        with pytest.raises(CapabilityError):
            psd_check(np.arange(201.0), kernel_params)

    def test_table(self):
        table = covariance_table(KernelParams(2), r_values=[0.0, 1.0, 2.0])
        assert list(table.columns) == ["r", "C_reg", "C_full", "bound"]
        assert math.isnan(table.loc[0, "C_full"])
        assert np.all(table["C_reg"] <= table["bound"] * (1 + 1e-2))


class TestIntegrals:
    def test_exponential_integral_constant(self):
        np.testing.assert_allclose(exponential_integral_constant(1), 2.0, rtol=1e-14)
        np.testing.assert_allclose(exponential_integral_constant(2), 2.0 * math.pi, rtol=1e-14)
        np.testing.assert_allclose(exponential_integral_constant(3), 8.0 * math.pi, rtol=1e-14)
