"""
phi4ce command line.

Each subcommand runs one verification suite and writes a versioned report:
covariance-table, tree-lengths, lemma3, gaussian-checks, identity13,
ks-solve, schwinger-compare, full-suite. Exit code 0 when every check
passes, 1 when any check fails or a suite crashes, 2 on usage errors and on
requests beyond the supported sizes.
"""

import argparse
import math
import os
import sys
import traceback

import numpy as np
import pandas as pd

from phi4ce.config import resolve_config
from phi4ce.covariance import (KernelParams, covariance_table, decay_constant, full_kernel_closed_form,
                               psd_check, shell_kernel_bound_check)
from phi4ce.errors import CapabilityError, ConfigError, ExpansionError
from phi4ce.gaussian import (CovarianceMatrix, GaussianIntegrator, Grid, InterpolationState, Monomial,
                             change_of_covariance_residual, dcov_dt_last, interpolate,
                             interpolate_closed_form, lemma1_constant, lemma1_search,
                             lemma2_constant_scan, lemma2_monomial_envelope, wick_moment, wick_moment_ibp)
from phi4ce.geometry import PointConfiguration, set_tree_bracket, steiner_length
from phi4ce.ksolver import (CONTRACTION_TARGET, SATURATION_TOL, KSConfig, KSSolver, decay_fit, load_checkpoint,
                            save_checkpoint, window_saturation)
from phi4ce.model import LatticeModel, ModelParams, SchwingerRequest
from phi4ce.reporting import Check, build_report, checks_table, print_checks, write_report
from phi4ce.trees import MAX_SERIES_ORDER, MAX_TREE_SIZE, catalan, generating_function_check, lemma3_sum

# =============================================================================
# CONFIGURATION
# =============================================================================

SUBCOMMANDS = ("covariance-table", "tree-lengths", "lemma3", "gaussian-checks", "identity13",
               "ks-solve", "schwinger-compare", "full-suite")

TREE_INSTANCES = 500
TREE_MAX_N = 8
TREE_BOX = 4.0
INTERPOLATION_DRAWS = 200
WICK_DRAWS = 40
COV_CHANGE_DRAWS = 20
SCAN_SAMPLES = 100_000
IDENTITY_COUPLINGS = (0.0, 0.005)    # plus the configured coupling
COMPARE_SEPARATIONS = (1.5, 2.0, 3.0)
DECAY_SEPARATIONS = (1.5, 2.0, 2.5, 3.0)
DECAY_WINDOW = (0.0, 3.0)            # one lattice for every separation, 7 sites
DECAY_SPACING = 0.5
DECAY_SLOPE_MAX = -0.85
FINE_SPACING = 0.5
CONTRACTION_RATIO_MAX = 0.8
FREE_TOL = 1e-8


def _log(rc, message):
    if not rc.quiet:
        print(message, file=sys.stderr)


def _banner(rc, title):
    _log(rc, "=" * 80)
    _log(rc, title)
    _log(rc, "=" * 80)


def _guard(checks, name, func):
    """Run one check; an ExpansionError turns into a FAIL verdict."""
    try:
        result = func()
    except ExpansionError as e:
        checks.append(Check.failure(name, e))
        return None
    if isinstance(result, Check):
        checks.append(result)
    else:
        checks.extend(result)
    return result


def _random_configuration(rng, sites, n):
    """Up to n admissible lattice points, picked greedily from a shuffled site list."""
    chosen = []
    for k in rng.permutation(len(sites)):
        p = sites[k]
        if all(np.linalg.norm(p - q) > 1.0 + 1e-9 for q in chosen):
            chosen.append(p)
        if len(chosen) == n:
            break
    return PointConfiguration(np.array(chosen), sites.shape[1])


def _integrator(rc, seed_offset=0):
    return GaussianIntegrator(rc.method, order=rc.order, seed=rc.seed + seed_offset, threads=rc.threads)


# =============================================================================
# SUITES
# =============================================================================

def suite_covariance(rc):
    _banner(rc, "COVARIANCE: decay certificate and kernel table")
    p = KernelParams(1)
    cert = decay_constant(p)
    checks = [
        Check.upper("decay_violation", cert.max_violation, 0.0),
        Check.truth("decay_nonnegative", cert.min_value >= 0.0, f"min C = {cert.min_value:.3e}"),
        Check.upper("decay_grid_drift", cert.drift, 0.01),
    ]
    table = covariance_table(p, certificate=cert)
    positive = table["r"] > 0
    closed = full_kernel_closed_form(table["r"][positive].to_numpy(), 1)
    full_err = float(np.max(np.abs(table["C_full"][positive].to_numpy() - closed)))
    checks.append(Check.upper("full_covariance_closed_form", full_err, 1e-10))

    grid = Grid.window(rc.window[0], rc.window[1], rc.h)
    min_eig = psd_check(grid.sites, p)
    checks.append(Check.upper("kernel_matrix_psd", -min_eig, 1e-10 * len(grid)))
    centers = _random_configuration(np.random.default_rng(rc.seed), grid.sites, 3).points
    ratio = shell_kernel_bound_check(cert, p, centers, grid.sites)
    checks.append(Check.upper("shell_kernel_bound", ratio, 1.0 + 1e-6))
    _log(rc, f"c1 = {cert.c1:.10f} at r = {cert.argmax_r:.4f}, drift = {cert.drift:.2e}")
    return checks, {"certificate": cert, "c1": cert.c1}, table


def _tree_battery(rc):
    rng = np.random.default_rng(rc.seed)
    rows = []
    for k in range(TREE_INSTANCES):
        n = int(rng.integers(3, TREE_MAX_N + 1))
        d = 1 if k % 5 == 0 else 2
        pts = rng.uniform(0.0, TREE_BOX, size=(n, d))
        split = int(rng.integers(1, n))
        full = steiner_length(pts, seed=rc.seed + k)
        head = steiner_length(pts[:split + 1])
        tail = steiner_length(pts[split:])
        x = [[p] for p in pts[:2]]
        sets_small = set_tree_bracket(x + [pts[2:split + 2]])
        sets_large = set_tree_bracket(x + [pts[2:]])
        tail_set = steiner_length(pts[split + 1:]) if split + 1 < n else None
        rows.append({
            "instance": k, "n": n, "d": d,
            "mst": full.mst_length, "steiner_upper": full.steiner_upper, "steiner_lower": full.steiner_lower,
            # ℓ <= ℓ' <= 2ℓ in bracket form
            "ratio_ok": (full.steiner_upper <= full.mst_length + 1e-12
                         and full.mst_length <= 2.0 * full.steiner_upper + 1e-12),
            # monotone and subadditive under appending points
            "append_ok": head.steiner_lower <= full.steiner_upper + 1e-12
                         and full.steiner_lower <= head.steiner_upper + tail.steiner_upper + 1e-12,
            # monotone decreasing and Lipschitz in the terminal set
            "set_ok": sets_large.steiner_lower <= sets_small.steiner_upper + 1e-12
                      and (tail_set is None
                           or sets_large.steiner_upper >= sets_small.steiner_lower - tail_set.steiner_upper - 1e-12),
        })
    return pd.DataFrame(rows)


def suite_tree_lengths(rc):
    _banner(rc, "TREE LENGTHS: bracket inequalities")
    table = _tree_battery(rc)
    checks = []
    for column in ("ratio_ok", "append_ok", "set_ok"):
        bad = int((~table[column]).sum())
        checks.append(Check.upper(f"tree_{column[:-3]}_violations", bad, 0))
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]])
    err = abs(steiner_length(tri).steiner_upper - math.sqrt(3.0))
    checks.append(Check.upper("equilateral_steiner", err, 1e-6))
    _log(rc, f"{len(table)} instances, Steiner/MST mean ratio "
             f"{float((table['steiner_upper'] / table['mst']).mean()):.4f}")
    return checks, {"instances": len(table)}, table


def suite_lemma3(rc):
    _banner(rc, f"TREE WEIGHTS: Speer sums up to n = {rc.n}")
    if rc.n > MAX_TREE_SIZE:
        raise CapabilityError(f"exhaustive tree sums are limited to n <= {MAX_TREE_SIZE}, got {rc.n}")
    checks, data = [], {}
    for n in range(2, rc.n + 1):
        total = lemma3_sum(n, rc.threads)
        expected = catalan(n - 1)
        check = Check.truth(f"lemma3_n{n}", total == expected, f"{total} = {expected}")
        checks.append(check)
        data[str(n)] = {"sum": total, "catalan": expected}
        if n == rc.n:
            print(f"{total} = {expected} {check.verdict()}", file=sys.stderr)
    order = min(rc.n, MAX_SERIES_ORDER)
    checks.append(Check.truth("generating_function", generating_function_check(order)))
    return checks, data, None


def suite_gaussian(rc):
    _banner(rc, "GAUSSIAN: interpolation, derivative identities, Wick engine")
    rng = np.random.default_rng(rc.seed)
    grid = Grid.window(rc.window[0], rc.window[1], rc.h)
    base = CovarianceMatrix.from_kernel(grid)
    n_sites = len(grid)

    worst_psd, worst_block, worst_closed, worst_dt = 0.0, 0.0, 0.0, 0.0
    for _ in range(INTERPOLATION_DRAWS):
        config = _random_configuration(rng, grid.sites, int(rng.integers(1, 4)))
        t = rng.uniform(size=config.n)
        C = interpolate(base, config, t)
        worst_psd = max(worst_psd, -C.min_eigenvalue())
        worst_closed = max(worst_closed, float(np.max(np.abs(
            C.entries - interpolate_closed_form(base, config, t).entries))))
        t0 = t.copy()
        t0[-1] = 0.0
        blocked = interpolate(base, config, t0).entries
        outside = InterpolationState(base, config, t).labels() == 0
        worst_block = max(worst_block, float(np.max(np.abs(blocked[np.ix_(~outside, outside)])))
                          if outside.any() and (~outside).any() else 0.0)
        state = InterpolationState(base, config, t)
        eps = 1e-6
        up, down = t.copy(), t.copy()
        up[-1] += eps
        down[-1] -= eps
        fd = (interpolate_closed_form(base, config, up).entries
              - interpolate_closed_form(base, config, down).entries) / (2.0 * eps)
        worst_dt = max(worst_dt, float(np.max(np.abs(fd - dcov_dt_last(state)))))

    checks = [
        Check.upper("interpolation_psd", worst_psd, 1e-10 * n_sites),
        Check.upper("interpolation_closed_form", worst_closed, 1e-12),
        Check.upper("block_factorization", worst_block, 0.0),
        Check.upper("dcov_dt_central_difference", worst_dt, 1e-6),
    ]

    worst_change = 0.0
    for _ in range(COV_CHANGE_DRAWS):
        config = _random_configuration(rng, grid.sites, int(rng.integers(1, 3)))
        t = rng.uniform(0.1, 0.9, size=config.n)
        legs = rng.integers(0, n_sites, size=int(rng.choice((2, 4))))
        worst_change = max(worst_change, change_of_covariance_residual(
            InterpolationState(base, config, t), Monomial(legs.tolist())))
    checks.append(Check.upper("change_of_covariance", worst_change, 1e-5))

    worst_wick = 0.0
    for _ in range(WICK_DRAWS):
        degree = 2 * int(rng.integers(1, 7))
        mono = Monomial(rng.integers(0, min(3, n_sites), size=degree).tolist())
        a, b = wick_moment(base, mono), wick_moment_ibp(base, mono)
        worst_wick = max(worst_wick, abs(a - b) / max(abs(a), 1e-300))
    checks.append(Check.upper("wick_matchings_vs_ibp", worst_wick, 1e-12))

    envelope = lemma2_monomial_envelope(base, list(range(min(2, n_sites))), max_degree=8)
    checks.append(Check.truth("lemma2_envelope_finite", math.isfinite(envelope) and envelope > 0,
                              f"c = {envelope:.6f}"))
    data = {}

    def moment_fit():
        scan = lemma2_constant_scan(base, max_r=3, max_n=2, n_samples=SCAN_SAMPLES, seed=rc.seed,
                                    threads=rc.threads)
        data["moment_fit"] = {"c3": scan.c3, "c4": scan.c4}
        return Check.upper("moment_bound_fit", scan.max_ratio, 1.0 + 1e-6)

    _guard(checks, "moment_bound_fit", moment_fit)
    c, (x_search, c_search) = lemma1_constant(), lemma1_search()
    checks.append(Check.upper("lemma1_constant", abs(c - c_search), 1e-10 * c))
    data.update({"lemma2_envelope": envelope, "lemma1_constant": c, "lemma1_argmax": x_search})
    return checks, data, None


def _identity_model(rc, coupling):
    params = ModelParams.build(coupling, rc.window, rc.h)
    return LatticeModel(params, _integrator(rc), verbose=not rc.quiet)


def suite_identity13(rc):
    _banner(rc, "FACTORIZATION IDENTITY: Z~ = Z_bold Z + h Σ_z Z~")
    rng = np.random.default_rng(rc.seed)
    checks, data = [], {}
    couplings = sorted(set(IDENTITY_COUPLINGS) | {rc.coupling})
    for coupling in couplings:
        model = _identity_model(rc, coupling)
        sites = model.grid.sites
        for n in (1, 2):
            config = _random_configuration(rng, sites, n)
            if config.n < n:
                continue
            name = f"identity13_lambda{coupling:g}_n{n}"

            def run(model=model, config=config, name=name):
                rep = model.identity13_residual(config)
                data[name] = rep
                return Check.upper(name, rep.residual, rep.tolerance, rep.errors)

            _guard(checks, name, run)

        def expansion(model=model, coupling=coupling):
            rep = model.expansion14_check(3)
            data[f"expansion14_lambda{coupling:g}"] = rep
            tol = 1e-9 * max(1.0, abs(rep.target))
            return Check.upper(f"expansion14_lambda{coupling:g}", rep.residuals[-1], tol,
                               {"quadrature": tol})

        _guard(checks, f"expansion14_lambda{coupling:g}", expansion)
    return checks, data, None


def _ks_config(rc, coupling=None, window=None, h=None):
    return KSConfig(coupling=rc.coupling if coupling is None else coupling,
                    h=rc.h if h is None else h,
                    window=tuple(rc.window if window is None else window),
                    n_max=rc.n_max, m_max=rc.m_max, tol=rc.tol, method=rc.method,
                    quadrature_order=rc.order, seed=rc.seed, threads=rc.threads)


def suite_ks(rc):
    _banner(rc, "KIRKWOOD-SALZBURG: fixed point, norms, contraction")
    ks = _ks_config(rc)
    solver = KSSolver(ks, verbose=not rc.quiet)
    initial = None
    if rc.resume and rc.checkpoint and os.path.exists(rc.checkpoint):
        _, tables = load_checkpoint(rc.checkpoint, ks)
        initial = tables.get(0)
        _log(rc, f"resuming from {rc.checkpoint}")
    result = solver.solve(2, initial)
    if rc.checkpoint:
        save_checkpoint(rc.checkpoint, ks, result)

    lo, hi = ks.window
    saturation, saturation_checks = {}, []

    def saturate():
        half = _ks_config(rc, window=(lo, lo + 0.5 * (hi - lo)))
        saturation["report"] = window_saturation(half, doubled=(solver, result))
        rep = saturation["report"]
        _log(rc, f"window {rep.window} -> {rep.doubled_window}: S2 relative change {rep.relative_change:.2e}")
        return Check.upper("window_saturation", rep.relative_change, SATURATION_TOL)

    _guard(saturation_checks, "window_saturation", saturate)
    report = solver.norm_report(result, seed=rc.seed, saturation=saturation.get("report"))
    ops = solver.operator_norms(seed=rc.seed)
    ratios = [q for r in result.ratios for q in result.ratios[r]]
    a0_exact = ops["A0[0]"].exact
    cert = decay_constant(KernelParams(1))
    checks = [
        Check.upper("picard_ratio", max(ratios, default=0.0), CONTRACTION_RATIO_MAX),
        Check.upper("a0_norm", a0_exact, CONTRACTION_TARGET),
        Check.upper("a0_battery_below_exact", ops["A0[0]"].battery - a0_exact, 1e-12 * max(1.0, a0_exact)),
        Check.upper("a0_exact_below_estimate", a0_exact - solver.a0_bound_estimate(cert.c1), 1e-12),
        Check.truth("norm_pattern", report.pattern_holds, f"c_hat = {report.c_hat:.4g}"),
    ]
    f0 = result.f[0]
    worst = 0.0
    for row in solver.space.rows:
        pert = solver.perturbative_f0(row)
        shift = abs(pert - 1.0)
        if shift > 0.0:
            worst = max(worst, abs(f0.value(row) - pert) / shift)
    checks.append(Check.upper("perturbative_f0", worst, 0.1))
    checks.extend(saturation_checks)
    data = {"iterations": result.iterations, "residuals": result.residuals, "truncation": result.truncation,
            "norms": report, "configs": len(solver.space)}
    return checks, data, None


def _compare_one(rc, coupling, separation):
    h = rc.h if abs(separation / rc.h - round(separation / rc.h)) < 1e-9 else FINE_SPACING
    ks = _ks_config(rc, coupling, (0.0, separation), h)
    solver = KSSolver(ks, verbose=False)
    result = solver.solve(1)
    req = SchwingerRequest((0.0, separation))
    w = tuple(solver.model.site(p) for p in req.points)
    expansion = float(solver.schwinger(result, 2)[solver.space.w_index(w)])
    brute = solver.model.schwinger_bruteforce(req)
    trunc = solver.truncation
    errors = {"quadrature": FREE_TOL * max(1.0, abs(brute.value)),
              "monte_carlo": 3.0 * brute.error,
              "truncation": trunc["dropped_magnitude"] + (trunc["last_m_magnitude"] if trunc["open_chains"] else 0.0)}
    return expansion, brute.value, errors


def decay_profile(rc, window=DECAY_WINDOW, h=DECAY_SPACING, separations=DECAY_SEPARATIONS):
    """S^c_2(lo, lo + sep) from a single fixed point on one window and spacing, and its log-slope."""
    solver = KSSolver(_ks_config(rc, rc.coupling, window, h), verbose=False)
    S = solver.schwinger(solver.solve(1), 2)
    anchor = solver.model.site(window[0])
    values = [float(S[solver.space.w_index((anchor, solver.model.site(window[0] + sep)))])
              for sep in separations]
    slope, intercept, stderr = decay_fit(separations, values)
    return {"window": list(window), "h": h, "separations": list(separations), "values": values,
            "slope": slope, "intercept": intercept, "stderr": stderr}


def suite_schwinger(rc):
    _banner(rc, "SCHWINGER: expansion vs brute force, decay")
    checks, data = [], {}
    for sep in COMPARE_SEPARATIONS:
        def free(sep=sep):
            exp0, brute0, _ = _compare_one(rc, 0.0, sep)
            return Check.upper(f"free_propagator_sep{sep:g}", abs(exp0 - brute0), FREE_TOL)

        _guard(checks, f"free_propagator_sep{sep:g}", free)
        if rc.coupling == 0.0:
            continue

        def interacting(sep=sep):
            value, brute, errors = _compare_one(rc, rc.coupling, sep)
            data[f"sep{sep:g}"] = {"expansion": value, "bruteforce": brute}
            return Check.upper(f"oracle_equivalence_sep{sep:g}", abs(value - brute), sum(errors.values()),
                               errors)

        _guard(checks, f"oracle_equivalence_sep{sep:g}", interacting)
    if rc.coupling == 0.0:
        worst = max((c.value for c in checks), default=0.0)
        print(f"|Δ| = {worst:.1e} < {FREE_TOL:g} {'PASS' if worst < FREE_TOL else 'FAIL'}", file=sys.stderr)
        return checks, data, None

    def decay():
        fit = decay_profile(rc)
        data["decay"] = fit
        return Check.upper("decay_slope", fit["slope"], DECAY_SLOPE_MAX, {"fit": fit["stderr"]})

    _guard(checks, "decay_slope", decay)
    return checks, data, None


SUITES = {
    "covariance-table": suite_covariance,
    "tree-lengths": suite_tree_lengths,
    "lemma3": suite_lemma3,
    "gaussian-checks": suite_gaussian,
    "identity13": suite_identity13,
    "ks-solve": suite_ks,
    "schwinger-compare": suite_schwinger,
}


def suite_full(rc):
    checks, data = [], {}
    for name, suite in SUITES.items():
        try:
            sub_checks, sub_data, _ = suite(rc)
            data[name] = {"status": "success", "data": sub_data}
        except CapabilityError:
            raise
        except ExpansionError as e:
            sub_checks = [Check.failure(name, e)]
            data[name] = {"status": "error", "error": str(e)}
        for c in sub_checks:
            c.name = f"{name}/{c.name}"
        checks.extend(sub_checks)
    return checks, data, checks_table(checks)


# =============================================================================
# ENTRY POINT
# =============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="phi4ce", description="cluster-expansion verification suites")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--lambda", dest="coupling", type=float, default=None)
    parser.add_argument("--h", type=float, default=None)
    parser.add_argument("--window", default=None, help="lo,hi")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--format", dest="fmt", choices=("json", "csv"), default=None)
    parser.add_argument("--nmax", dest="n_max", type=int, default=None)
    parser.add_argument("--mmax", dest="m_max", type=int, default=None)
    parser.add_argument("--tol", type=float, default=None)
    parser.add_argument("--method", choices=("tensor", "mc"), default=None)
    parser.add_argument("--order", type=int, default=None)
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--config", dest="config_file", default=None)
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--resume", action="store_true", default=None)
    parser.add_argument("--quiet", action="store_true", default=None)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0

    flags = vars(args)
    subcommand = flags.pop("subcommand")
    config_file = flags.pop("config_file")
    try:
        rc = resolve_config(subcommand, flags, config_file)
    except ConfigError as e:
        print(f"phi4ce: {e}", file=sys.stderr)
        return 2

    try:
        suite = suite_full if subcommand == "full-suite" else SUITES[subcommand]
        checks, data, table = suite(rc)
        report = build_report(subcommand, rc.to_dict(), checks, data)
        if not rc.quiet:
            print_checks(checks)
        write_report(report, rc.out, rc.fmt, table)
        return 0 if report["passed"] else 1
    except CapabilityError as e:
        print(f"phi4ce {subcommand}: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"phi4ce {subcommand}: Error - {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


def main():
    return run(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
