"""
Tests for the Gaussian engine: grids, interpolated covariances, the
t-derivative formula, Wick moments and the quadrature integrator.
"""

import math

import numpy as np
import pytest

from phi4ce.errors import CapabilityError, DomainError
from phi4ce.gaussian import (CovarianceMatrix, GaussianIntegrator, Grid, InterpolationState, Monomial,
                             all_pairings, change_of_covariance_residual, dcov_dt_last, gaussian_samples,
                             interpolate, interpolate_closed_form, lemma1_constant, lemma1_search,
                             lemma1_stationary_point, lemma2_constant_scan, lemma2_monomial_envelope,
                             sqrt_factor, wick_moment, wick_moment_ibp)
from phi4ce.geometry import PointConfiguration, shell_labels

ATOL = 1e-12
FD_EPS = 1e-6


@pytest.fixture
def fine_base():
    return CovarianceMatrix.from_kernel(Grid.window(0.0, 5.0, 0.5))


def random_state(base, rng, config=(0.0, 2.5)):
    x = PointConfiguration(list(config))
    return x, rng.random(x.n)


class TestGrid:
    def test_window(self, grid4):
        assert len(grid4) == 4
        assert grid4.cell_volume == 1.0
        np.testing.assert_array_equal(grid4.sites[:, 0], [0.0, 1.0, 2.0, 3.0])

    def test_lookup(self, grid4):
        assert grid4.index_of(2.0) == 2
        assert grid4.index_of(2.5) is None
        assert grid4.lattice_offset(5.0)
        assert not grid4.lattice_offset(0.5)

    def test_validation(self):
        with pytest.raises(DomainError):
            Grid([0.0, 0.0], 1.0)
        with pytest.raises(DomainError):
            Grid([0.0, 1.0], 0.0)

    def test_two_dimensional_window(self):
        grid = Grid.window(0.0, 1.0, 0.5, dimension=2)
        assert len(grid) == 9
        assert grid.cell_volume == 0.25


class TestCovarianceMatrix:
    def test_symmetric_psd(self, base4):
        assert base4.is_psd()
        np.testing.assert_allclose(base4.entries, base4.entries.T)

    def test_rejects_asymmetric(self, grid4):
        entries = np.eye(4)
        entries[0, 1] = 0.1
        with pytest.raises(DomainError):
            CovarianceMatrix(entries, grid4)

    def test_restrict(self, base4):
        sub = base4.restrict([1, 3])
        assert sub.entries[0, 1] == base4.entries[1, 3]
        np.testing.assert_array_equal(sub.grid.sites[:, 0], [1.0, 3.0])

    def test_save_load(self, base4, tmp_path):
        path = tmp_path / "cov.npz"
        base4.save(path)
        loaded = CovarianceMatrix.load(path)
        np.testing.assert_array_equal(loaded.entries, base4.entries)
        assert loaded.grid.spacing == base4.grid.spacing


class TestInterpolation:
    def test_recursion_matches_closed_form(self, fine_base, rng):
        for config in [(0.0,), (0.0, 2.5), (1.0, 2.5, 4.0)]:
            x = PointConfiguration(list(config))
            t = rng.random(x.n)
            np.testing.assert_allclose(interpolate(fine_base, x, t).entries,
                                       interpolate_closed_form(fine_base, x, t).entries, atol=ATOL)

    def test_all_ones_is_base(self, fine_base):
        x = PointConfiguration([0.0, 2.5])
        np.testing.assert_allclose(interpolate(fine_base, x, [1.0, 1.0]).entries, fine_base.entries, atol=ATOL)

    def test_psd_and_nonnegative(self, fine_base, rng):
        for _ in range(20):
            x, t = random_state(fine_base, rng)
            cov = interpolate(fine_base, x, t)
            assert cov.is_psd()
            assert np.min(cov.entries) >= -ATOL

    def test_block_factorization_at_zero(self, fine_base, rng):
        x = PointConfiguration([0.0, 2.5])
        t = np.array([rng.random(), 0.0])
        cov = interpolate(fine_base, x, t).entries
        inside = shell_labels(x, fine_base.grid.sites) > 0
        np.testing.assert_array_equal(cov[np.ix_(inside, ~inside)], 0.0)
        np.testing.assert_allclose(cov[np.ix_(~inside, ~inside)], fine_base.entries[np.ix_(~inside, ~inside)])

    def test_state_validation(self, fine_base):
        x = PointConfiguration([0.0, 2.5])
        with pytest.raises(DomainError):
            InterpolationState(fine_base, x, [0.5])
        with pytest.raises(DomainError):
            InterpolationState(fine_base, x, [0.5, 1.5])

    def test_derivative_matches_central_differences(self, fine_base, rng):
        x, t = random_state(fine_base, rng, (0.0, 2.5, 5.0))
        t[-1] = 0.5
        state = InterpolationState(fine_base, x, t)
        up, down = t.copy(), t.copy()
        up[-1] += FD_EPS
        down[-1] -= FD_EPS
        fd = (interpolate_closed_form(fine_base, x, up).entries
              - interpolate_closed_form(fine_base, x, down).entries) / (2 * FD_EPS)
        assert np.max(np.abs(dcov_dt_last(state) - fd)) < 1e-6


class TestChangeOfCovariance:
    @pytest.mark.parametrize("poly", [
        Monomial([1, 2]),
        Monomial({0: 2, 3: 2}),
        {Monomial([1, 2]): 1.0, Monomial([0, 1, 2, 3]): 0.5, Monomial({1: 3, 3: 1}): -2.0},
    ])
    def test_residual(self, base4, poly):
        state = InterpolationState(base4, PointConfiguration([0.0]), [0.3])
        assert change_of_covariance_residual(state, poly) < 1e-5

    def test_two_points(self, fine_base):
        state = InterpolationState(fine_base, PointConfiguration([0.0, 2.5]), [0.4, 0.7])
        poly = {Monomial([1, 6, 9]): 1.0, Monomial([2, 9]): 1.0}
        assert change_of_covariance_residual(state, poly) < 1e-5


class TestWick:
    def test_pairings(self):
        assert sum(1 for _ in all_pairings(range(6))) == 15
        assert list(all_pairings([])) == [[]]

    def test_low_moments(self, base4):
        C = base4.entries
        np.testing.assert_allclose(wick_moment(base4, Monomial([0, 1])), C[0, 1], rtol=ATOL)
        np.testing.assert_allclose(wick_moment(base4, Monomial({0: 4})), 3 * C[0, 0] ** 2, rtol=ATOL)
        assert wick_moment(base4, Monomial([0, 1, 2])) == 0.0

    @pytest.mark.parametrize("degree", [4, 8, 12])
    def test_matchings_match_integration_by_parts(self, base4, rng, degree):
        mono = Monomial(list(rng.integers(0, 4, size=degree)))
        np.testing.assert_allclose(wick_moment(base4, mono), wick_moment_ibp(base4, mono), rtol=ATOL)

    def test_degree_limit(self, base4):
        with pytest.raises(CapabilityError):
            wick_moment(base4, Monomial({0: 14}))
        with pytest.raises(DomainError):
            Monomial({0: -1})

    def test_monomial_envelope(self, base4):
        value = lemma2_monomial_envelope(base4, [0, 2], max_degree=6)
        assert 0.0 < value < math.inf


class TestMomentBounds:
    def test_constant_scan(self):
        base = CovarianceMatrix.from_kernel(Grid.window(0.0, 6.0, 1.0))
        scan = lemma2_constant_scan(base, max_r=2, max_n=2, n_samples=20_000)
        assert scan.c3 >= 1.0 and scan.c4 >= 1.0
        assert scan.max_ratio <= 1.0 + 1e-6
        assert len(scan.cells) == 3 * 3 * 2

    def test_half_normal_cells(self):
        base = CovarianceMatrix.from_kernel(Grid.window(0.0, 6.0, 1.0))
        scan = lemma2_constant_scan(base, max_r=2, max_n=1, n_samples=200_000, seed=5)
        cells = {(c["r"], c["n"], c["placement"]): c for c in scan.cells}
        c00 = base.entries[0, 0]
        rho = base.entries[0, 2] / c00
        mean_abs = math.sqrt(2.0 * c00 / math.pi)
        pair_abs = 2.0 * c00 / math.pi * (math.sqrt(1.0 - rho ** 2) + rho * math.asin(rho))
        expected = {
            (1, 0, "spread"): 1.0 + mean_abs,
            (2, 0, "coincident"): 1.0 + 2.0 * mean_abs + c00,
            (2, 0, "spread"): 1.0 + 2.0 * mean_abs + pair_abs,
            (0, 1, "spread"): 1.0 + 3.0 * mean_abs + 3.0 * c00 + 2.0 * math.sqrt(2.0 / math.pi) * c00 ** 1.5,
        }
        for key, value in expected.items():
            assert abs(cells[key]["lhs"] - value) <= 4.0 * cells[key]["stderr"], key

    def test_scan_limits(self, base4):
        with pytest.raises(CapabilityError):
            lemma2_constant_scan(base4, max_r=7)

    def test_stationary_point(self):
        xi = lemma1_stationary_point()
        np.testing.assert_allclose((1 + xi) ** 3, 2 * xi ** 3, rtol=1e-12)

    def test_constant_matches_search(self):
        _, value = lemma1_search()
        np.testing.assert_allclose(lemma1_constant(), value, rtol=1e-10)


class TestIntegrator:
    def test_tensor_second_moments(self, base4):
        integrator = GaussianIntegrator("tensor", order=12)
        for a, b in [(0, 0), (0, 1), (1, 3)]:
            est = integrator.expectation(base4, lambda phi: phi[:, a] * phi[:, b])
            np.testing.assert_allclose(est.value, base4.entries[a, b], rtol=1e-12)
            assert est.error == 0.0

    def test_tensor_exponential(self, base4):
        u = np.array([0.5, -0.3, 0.2, 0.1])
        est = GaussianIntegrator("tensor", order=12).expectation(base4, lambda phi: np.exp(phi @ u))
        np.testing.assert_allclose(est.value, math.exp(0.5 * u @ base4.entries @ u), rtol=1e-12)

    def test_monte_carlo(self, base4):
        est = GaussianIntegrator("mc", samples=100_000, seed=5).expectation(base4, lambda phi: phi[:, 0] ** 2)
        assert est.method == "mc"
        assert abs(est.value - base4.entries[0, 0]) <= 4 * est.error

    def test_common_random_numbers(self, base4):
        integrator = GaussianIntegrator("mc", samples=1000, seed=2)
        a = integrator.expectation(base4, lambda phi: phi[:, 1])
        b = integrator.expectation(base4, lambda phi: phi[:, 1])
        assert a == b

    def test_node_budget(self):
        integrator = GaussianIntegrator("tensor", order=40, max_nodes=20_000)
        assert integrator.effective_order(0) == 40
        assert integrator.effective_order(1) == 40
        assert integrator.effective_order(4) == 11
        assert integrator.effective_order(10) == 6

    def test_unknown_method(self):
        with pytest.raises(DomainError):
            GaussianIntegrator("sparse")

    def test_samples_are_seeded(self, base4):
        a = gaussian_samples(base4, 500, seed=9)
        b = gaussian_samples(base4, 500, seed=9)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (500, 4)

    def test_singular_square_root(self):
        L = sqrt_factor(np.ones((2, 2)))
        np.testing.assert_allclose(L @ L.T, np.ones((2, 2)), atol=ATOL)
