"""
Tests for the Kirkwood-Salzburg solver on small windows.

Without truncation the finite-window fixed point is f_x = Z_{Λ\\B_x}/Z_Λ and
the reconstructed Schwinger functions equal the brute-force cumulants, so
both are checked against the model directly.
"""

import math

import numpy as np
import pytest
from scipy import sparse

from phi4ce.covariance import KernelParams, decay_constant
from phi4ce.errors import CapabilityError, DomainError, NonContractionError
from phi4ce.ksolver import (ConfigSpace, KSSolver, SequenceFunction, compare_with_bruteforce, decay_fit,
                            induced_norm, load_checkpoint, norm_prime, norm_r, operator_norm_estimate,
                            save_checkpoint, schwinger_expansion, solve_fixed_point, window_saturation)
from phi4ce.model import SchwingerRequest

ATOL = 1e-9
LAMBDA = 0.02


@pytest.fixture
def free_solver(make_ks):
    return KSSolver(make_ks(0.0))


@pytest.fixture
def solver(make_ks):
    return KSSolver(make_ks(LAMBDA))


class TestConfig:
    def test_truncation_bounds(self, make_ks):
        with pytest.raises(DomainError):
            make_ks(LAMBDA, n_max=1)
        with pytest.raises(CapabilityError):
            make_ks(LAMBDA, m_max=4)

    def test_round_trip_dict(self, make_ks):
        ks = make_ks(LAMBDA)
        data = ks.to_dict()
        assert data["window"] == [0.0, 3.0]
        assert data["coupling"] == LAMBDA


class TestSpace:
    def test_rows(self, solver):
        space = solver.space
        assert space.n_w == 4
        assert len(space) == 4 + 6
        assert space.rows[:4] == [(0,), (1,), (2,), (3,)]
        assert (0, 2) in space.index and (2, 0) in space.index
        assert (0, 1) not in space.index

    def test_tree_lengths(self, solver):
        space = solver.space
        assert space.tree_length((), (0, 2)) == 0.0
        assert space.tree_length((1,), (0, 2)) == 1.0
        assert space.tree_length((3,), (0,)) == 3.0
        assert space.tree_length((0, 3), (1,)) == 3.0

    def test_weights(self, solver):
        w = solver.space.weights(0)
        lengths = [len(row) for row in solver.space.rows]
        np.testing.assert_allclose(w, [2.0 ** (1 - n) for n in lengths])
        np.testing.assert_allclose(solver.space.prime_weights(1), np.ones(4))
        np.testing.assert_allclose(solver.space.prime_weights(2)[1], math.exp(0.5))


class TestSequenceFunctions:
    def test_unit_norm(self, solver):
        e = SequenceFunction.unit(solver.space)
        assert norm_r(e) == 1.0
        assert e.value((0,)) == 1.0 and e.value((0, 2)) == 0.0

    def test_norm_is_homogeneous(self, solver):
        f = SequenceFunction.constant(solver.space, 1, 2.0)
        np.testing.assert_allclose(norm_r(f.scaled(-3.0)), 3.0 * norm_r(f))
        assert norm_r(f - f) == 0.0

    def test_prime_norm(self, solver):
        g = np.ones(16)
        np.testing.assert_allclose(norm_prime(g, solver.space, 2), 0.5 * math.exp(1.5))


class TestOperators:
    def test_free_a0_is_the_shift(self, free_solver):
        A = free_solver.a0().toarray()
        significant = A[np.abs(A) > 1e-12]
        assert len(significant) == 6
        np.testing.assert_array_equal(significant, 1.0)

    def test_free_a0_on_unit(self, free_solver):
        e = SequenceFunction.unit(free_solver.space)
        out = free_solver.apply_A0(e)
        for row in free_solver.space.rows:
            assert out.value(row) == pytest.approx(1.0 if len(row) == 2 else 0.0, abs=1e-12)

    def test_a0_acts_on_every_arity(self, solver):
        f = SequenceFunction.constant(solver.space, 2, 1.0)
        out = solver.apply_A0(f)
        assert out.values.shape == f.values.shape
        np.testing.assert_allclose(out.values[:, 0], out.values[:, -1])

    def test_as_shapes(self, solver):
        nw, n = solver.space.n_w, len(solver.space)
        assert solver.a_s(1, 2).shape == (n * nw ** 2, n * nw)
        assert solver.a_s(3, 2).nnz == 0
        assert solver.apply_As(SequenceFunction(solver.space, 0), 3, 2).arity == 2
        with pytest.raises(DomainError):
            solver.apply_As(SequenceFunction(solver.space, 0), 1, 2)
        with pytest.raises(DomainError):
            solver.t_s(3, 2)

    def test_apply_t(self, solver):
        f = SequenceFunction.unit(solver.space)
        assert solver.apply_T(f, 1, 1).shape == (solver.space.n_w,)
        with pytest.raises(DomainError):
            solver.apply_T(f, 1, 2)

    def test_induced_norm_witness(self, solver):
        sp = solver.space
        est = operator_norm_estimate(solver.a0(), sp.weights(0), sp.weights(0), 0, 0)
        assert est.battery <= est.exact * (1 + 1e-12)
        assert est.battery >= est.exact * (1 - 1e-12)

    def test_zero_operator(self):
        value, row = induced_norm(sparse.csr_matrix((3, 3)), np.ones(3), np.ones(3), 0, 0)
        assert value == 0.0 and row == 0


class TestFixedPoint:
    def test_free_fixed_point(self, free_solver):
        result = free_solver.solve(2)
        np.testing.assert_allclose(result.f[0].values, 1.0, atol=1e-12)
        assert result.iterations[0] == 1
        assert np.max(np.abs(result.f[1].values)) < 1e-14

    def test_free_two_point_function(self, free_solver):
        result = free_solver.solve(1)
        S = free_solver.schwinger(result, 2).reshape(4, 4)
        np.testing.assert_allclose(S, free_solver.model.base.entries, atol=1e-12)

    def test_ratio_of_partition_functions(self, solver):
        result = solver.solve(0)
        model = solver.model
        z = model.partition_function().value
        for row in solver.space.rows:
            rest = model.partition_function(region=model.complement_sites(solver.space.config(row))).value
            np.testing.assert_allclose(result.f[0].value(row), rest / z, atol=ATOL)

    def test_contraction(self, solver):
        result = solver.solve(2)
        ratios = [q for r in result.ratios for q in result.ratios[r]]
        assert max(ratios) <= 0.8
        assert all(res < solver.ks.tol for res in (v[-1] for v in result.residuals.values()))

    def test_first_order_agrees(self, make_ks):
        weak = KSSolver(make_ks(0.002))
        result = weak.solve(0)
        for row in weak.space.rows:
            pert = weak.perturbative_f0(row)
            assert abs(result.f[0].value(row) - pert) <= 1e-2 * abs(pert - 1.0)

    def test_non_contraction_is_reported(self, make_ks):
        stuck = KSSolver(make_ks(LAMBDA))
        stuck._matrices["a0"] = 1.5 * sparse.identity(len(stuck.space), format="csr")
        e = SequenceFunction.unit(stuck.space).flat()
        with pytest.raises(NonContractionError) as info:
            stuck.picard(e, 0)
        assert len(info.value.residuals) == 2

    def test_iteration_limit(self, make_ks):
        slow = KSSolver(make_ks(LAMBDA, max_iterations=1))
        with pytest.raises(NonContractionError, match="Limit"):
            slow.solve(0)

    def test_truncation_is_recorded(self, make_ks):
        truncated = KSSolver(make_ks(LAMBDA, window=(0.0, 4.0), n_max=2))
        result = truncated.solve(0)
        assert result.truncation["dropped_terms"] > 0
        assert result.truncation["dropped_magnitude"] > 0.0

    def test_longer_configurations_shrink_the_error(self, make_ks):
        req = SchwingerRequest((0.0, 2.0))
        errors = {}
        for n_max in (2, 3):
            ks = make_ks(LAMBDA, window=(0.0, 4.0), n_max=n_max)
            expansion, brute, budget = compare_with_bruteforce(req, ks)
            errors[n_max] = abs(expansion - brute.value)
            assert errors[n_max] <= sum(budget.values())
        assert errors[3] < errors[2]
        assert errors[3] < 1e-7
        assert KSSolver(make_ks(LAMBDA, window=(0.0, 4.0), n_max=3)).solve(0).truncation["dropped_terms"] == 0

    def test_unsupported_arity(self, solver):
        with pytest.raises(CapabilityError):
            solver.solve(3)


class TestSchwinger:
    @pytest.mark.parametrize("points", [(0.0, 2.0), (0.0, 3.0), (1.0, 2.0), (1.0, 1.0)])
    def test_matches_bruteforce(self, make_ks, points):
        ks = make_ks(LAMBDA)
        expansion, brute, errors = compare_with_bruteforce(SchwingerRequest(points), ks)
        assert abs(expansion - brute.value) <= sum(errors.values())
        assert abs(expansion - brute.value) < 1e-8

    def test_fine_lattice(self, make_ks):
        ks = make_ks(LAMBDA, window=(0.0, 1.5), h=0.5)
        expansion, brute, _ = compare_with_bruteforce(SchwingerRequest((0.0, 1.5)), ks)
        np.testing.assert_allclose(expansion, brute.value, atol=1e-8)

    def test_one_point_vanishes(self, make_ks):
        assert abs(schwinger_expansion(SchwingerRequest((1.0,)), make_ks(LAMBDA))) < 1e-12

    def test_symmetric(self, solver):
        S = solver.schwinger(solver.solve(1), 2).reshape(4, 4)
        np.testing.assert_allclose(S, S.T, atol=1e-10)

    def test_needs_lower_arities(self, solver):
        with pytest.raises(CapabilityError):
            solver.schwinger(solver.solve(0), 2)

    def test_order_limit(self, make_ks):
        with pytest.raises(CapabilityError):
            schwinger_expansion(SchwingerRequest((0.0, 1.0, 2.0)), make_ks(LAMBDA))


class TestNorms:
    def test_contraction_bound(self, solver):
        report = solver.norm_report(solver.solve(2))
        assert report.operators["A0[0]"] <= 0.75
        assert report.pattern_holds
        assert set(report.norms) == {0, 1, 2}

    def test_a0_estimate_is_an_upper_bound(self, solver):
        c1 = decay_constant(KernelParams(1)).c1
        exact = solver.operator_norms()["A0[0]"].exact
        assert exact <= solver.a0_bound_estimate(c1) + 1e-12


class TestWindowSaturation:
    def test_free_theory_is_window_independent(self, make_ks):
        report = window_saturation(make_ks(0.0, window=(0.0, 1.5)))
        assert report.doubled_window == (0.0, 3.0)
        assert report.pairs == 4
        assert report.relative_change < 1e-12

    def test_interacting_change_is_small(self, make_ks):
        report = window_saturation(make_ks(LAMBDA, window=(0.0, 2.0)))
        assert 0.0 < report.relative_change
        assert report.holds()

    def test_reuses_doubled_solution(self, make_ks):
        wide = KSSolver(make_ks(LAMBDA, window=(0.0, 4.0)))
        result = wide.solve(1)
        reused = window_saturation(make_ks(LAMBDA, window=(0.0, 2.0)), doubled=(wide, result))
        fresh = window_saturation(make_ks(LAMBDA, window=(0.0, 2.0)))
        assert reused.max_abs_change == pytest.approx(fresh.max_abs_change, abs=1e-12)
        report = wide.norm_report(result, saturation=reused)
        assert report.saturation["doubled_window"] == (0.0, 4.0)

    def test_mismatched_solver(self, make_ks, solver):
        with pytest.raises(DomainError):
            window_saturation(make_ks(LAMBDA, window=(0.0, 2.0)), doubled=(solver, solver.solve(1)))


class TestDecayFit:
    def test_exponential(self):
        seps = np.array([1.0, 2.0, 3.0, 4.0])
        slope, intercept, stderr = decay_fit(seps, 3.0 * np.exp(-2.0 * seps))
        np.testing.assert_allclose(slope, -2.0, atol=1e-12)
        np.testing.assert_allclose(intercept, math.log(3.0), atol=1e-12)
        assert stderr < 1e-10

    def test_sign_is_ignored(self):
        slope, _, _ = decay_fit([1.0, 2.0, 3.0], [-1.0, -0.5, -0.25])
        np.testing.assert_allclose(slope, -math.log(2.0), atol=1e-12)

    def test_needs_three_values(self):
        with pytest.raises(DomainError):
            decay_fit([1.0, 2.0], [1.0, 0.5])
        with pytest.raises(DomainError):
            decay_fit([1.0, 2.0, 3.0], [1.0, 0.0, 0.5])


class TestCheckpoint:
    def test_round_trip(self, make_ks, tmp_path):
        ks = make_ks(LAMBDA)
        result = solve_fixed_point(ks, r_max=1)
        path = tmp_path / "ks.json"
        save_checkpoint(path, ks, result)
        loaded, tables = load_checkpoint(path, ks)
        assert loaded == ks
        np.testing.assert_array_equal(tables[0].values, result.f[0].values)
        np.testing.assert_array_equal(tables[1].values, result.f[1].values)

    def test_resume_converges_immediately(self, make_ks, tmp_path):
        ks = make_ks(LAMBDA)
        result = solve_fixed_point(ks, r_max=0)
        path = tmp_path / "ks.json"
        save_checkpoint(path, ks, result)
        _, tables = load_checkpoint(path)
        resumed = KSSolver(ks).solve(0, initial=tables[0])
        assert resumed.iterations[0] <= 2

    def test_mismatched_config(self, make_ks, tmp_path):
        path = tmp_path / "ks.json"
        ks = make_ks(LAMBDA)
        save_checkpoint(path, ks, solve_fixed_point(ks, r_max=0))
        with pytest.raises(DomainError):
            load_checkpoint(path, make_ks(0.01))

    def test_version(self, tmp_path):
        path = tmp_path / "ks.json"
        path.write_text('{"checkpoint_version": 99}')
        with pytest.raises(DomainError):
            load_checkpoint(path)
