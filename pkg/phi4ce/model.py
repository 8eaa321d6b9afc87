"""
Discretized φ⁴ model on a one-dimensional window Λ.

1. partition_function(): Z_R[J] = E_C[exp(h Σ_{s∈R} (-λφ_s⁴ + J_s φ_s))] for
   any region R ⊂ Λ
2. ztilde() / zbold(): the interacting quantities of the cluster expansion,
   evaluated through the ordered-tree sum with Gauss-Legendre integration
   over t and the Δ operators realized as Gaussian integration by parts
3. identity13_residual() / expansion14_check(): the factorization identity
   and its iteration down to an empty remainder
4. Schwinger functions by moments and cumulants, by finite differences of
   ln Z, and by first-order perturbation theory

Field insertions (J-derivatives at the source) and Δ derivatives act on the
integrand site by site: ∂^m(φ^k e^{w(φ)}) = P_{k,m}(φ) e^{w(φ)} with
P_{k,0} = φ^k and P_{k,m+1} = P'_{k,m} + w' P_{k,m}.
"""

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss

from phi4ce.covariance import KernelParams
from phi4ce.errors import CapabilityError, DomainError
from phi4ce.gaussian import (CovarianceMatrix, Estimate, GaussianIntegrator, Grid,
                             _closed_form_entries)
from phi4ce.geometry import PointConfiguration, is_admissible, shell_labels
from phi4ce.trees import enumerate_trees, t_exponents

# =============================================================================
# CONFIGURATION
# =============================================================================

DESK_WINDOW = (0.0, 6.0)     # 7 sites at h = 1
DESK_SPACING = 1.0
MAX_TENSOR_SITES = 8
MAX_TREE_POINTS = 3          # Z̃ with n <= 3 points
T_ORDER = 8                  # Gauss-Legendre nodes per t_j
TREE_MAX_NODES = 20_000      # Gauss-Hermite node budget for n >= 2 terms
MAX_SCHWINGER_ORDER = 4
FD_STEP = 0.1                # central-difference step in u = h^d J
QUAD_FLOOR = 1e-9            # relative tolerance floor for tensor-rule identities
MC_SIGMAS = 4.0
MC_BATCHES = 8
MAX_EXPANSION_DEPTH = 3


@dataclass(frozen=True)
class ModelParams:
    coupling: float
    grid: Grid
    window: tuple
    kernel: KernelParams = KernelParams(1)

    def __post_init__(self):
        if not (math.isfinite(self.coupling) and self.coupling >= 0.0):
            raise DomainError(f"coupling must be finite and >= 0, got {self.coupling}")
        if self.grid.dimension != 1 or self.kernel.dimension != 1:
            raise CapabilityError("the interacting model runs in d=1 only")
        lo, hi = self.window
        if not (math.isfinite(lo) and math.isfinite(hi) and hi >= lo):
            raise DomainError(f"window must be a bounded interval, got {self.window}")

    @classmethod
    def build(cls, coupling, window=DESK_WINDOW, h=DESK_SPACING):
        lo, hi = float(window[0]), float(window[1])
        return cls(float(coupling), Grid.window(lo, hi, h), (lo, hi))

    @property
    def h(self):
        return self.grid.spacing


class SourceField:
    """J on the grid sites of the window."""

    def __init__(self, grid, values=None):
        self.grid = grid
        self.values = np.zeros(len(grid)) if values is None else np.asarray(values, dtype=float)
        if self.values.shape != (len(grid),):
            raise DomainError("source needs one value per grid site")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("source values must be finite")

    @classmethod
    def point(cls, grid, site, value):
        values = np.zeros(len(grid))
        values[site] = value
        return cls(grid, values)

    def support(self):
        return np.flatnonzero(self.values)


@dataclass(frozen=True)
class SchwingerRequest:
    points: tuple

    def __post_init__(self):
        if len(self.points) < 1:
            raise DomainError("a Schwinger request needs r >= 1 points")

    @property
    def r(self):
        return len(self.points)


@dataclass
class Identity13Report:
    lhs: float
    factorized: float
    z_sum: float
    residual: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.residual <= self.tolerance


@dataclass
class Expansion14Report:
    target: float
    partial_sums: list
    residuals: list
    term_counts: list
    terminated: bool


@lru_cache(maxsize=None)
def legendre_rule(order, dim):
    """Tensor Gauss-Legendre nodes and weights on [0, 1]^dim."""
    x, w = leggauss(order)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    nodes = np.array(list(itertools.product(*(x,) * dim)))
    weights = np.prod(np.array(list(itertools.product(*(w,) * dim))), 1)
    return nodes, weights


def set_partitions(items):
    """Yield every partition of `items` into non-empty blocks."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for partition in set_partitions(rest):
        for k in range(len(partition)):
            yield partition[:k] + [[first] + partition[k]] + partition[k + 1:]
        yield [[first]] + partition


def cumulant_from_moments(r, moment):
    """κ(1..r) = Σ_π (-1)^{|π|-1} (|π|-1)! ∏_B m_B; `moment` maps index tuples to m_B."""
    total = 0.0
    for partition in set_partitions(range(r)):
        blocks = len(partition)
        term = (-1.0) ** (blocks - 1) * math.factorial(blocks - 1)
        for block in partition:
            term *= moment(tuple(sorted(block)))
        total += term
    return total


class LatticeModel:
    """The finite-dimensional stand-in for the φ⁴ functional integral."""

    def __init__(self, params, integrator=None, t_order=T_ORDER, tree_max_nodes=TREE_MAX_NODES,
                 verbose=False):
        self.params = params
        self.grid = params.grid
        self.h = params.grid.spacing
        self.hd = params.grid.cell_volume
        self.coupling = params.coupling
        self.base = CovarianceMatrix.from_kernel(self.grid, params.kernel)
        self.integrator = integrator or GaussianIntegrator()
        self.tree_integrator = self.integrator.with_budget(min(tree_max_nodes, self.integrator.max_nodes))
        self.t_order = int(t_order)
        self.verbose = verbose
        self._cache = {}
        self._polys = {}

    # -------------------------------------------------------------------------
    # lattice helpers
    # -------------------------------------------------------------------------

    @property
    def n_sites(self):
        return len(self.grid)

    def all_sites(self):
        return np.arange(self.n_sites)

    def site(self, point):
        """Grid index of a window site; DomainError for anything else."""
        s = self.grid.index_of(point)
        if s is None:
            raise DomainError(f"point {point} is not a lattice site inside the window")
        return s

    def _site_or_none(self, point):
        if not self.grid.lattice_offset(point):
            raise DomainError(f"point {point} is not on the lattice")
        return self.grid.index_of(point)

    def config(self, points):
        return PointConfiguration(np.asarray(points, dtype=float).reshape(-1, 1), 1)

    def ball_sites(self, config, region=None):
        """Sites of region ∩ B_x (region defaults to Λ)."""
        region = self.all_sites() if region is None else np.asarray(region, dtype=int)
        if config.n == 0 or len(region) == 0:
            return np.zeros(0, dtype=int)
        labels = shell_labels(config, self.grid.sites[region])
        return region[labels > 0]

    def complement_sites(self, config, region=None):
        """Sites of region \\ B_x."""
        region = self.all_sites() if region is None else np.asarray(region, dtype=int)
        if config.n == 0 or len(region) == 0:
            return region
        labels = shell_labels(config, self.grid.sites[region])
        return region[labels == 0]

    def _source(self, J):
        if J is None:
            return np.zeros(self.n_sites)
        if isinstance(J, SourceField):
            return J.values
        values = np.asarray(J, dtype=float)
        if values.shape != (self.n_sites,):
            raise DomainError("source needs one value per grid site")
        return values

    def _polynomial(self, k, m, j_value):
        key = (k, m, float(j_value))
        if key not in self._polys:
            P = Polynomial.basis(k) if k else Polynomial([1.0])
            w_prime = Polynomial([self.hd * j_value, 0.0, 0.0, -4.0 * self.coupling * self.hd])
            for _ in range(m):
                P = P.deriv() + w_prime * P
            self._polys[key] = P
        return self._polys[key]

    def shifted(self, steps):
        """The same model on a window translated by `steps` lattice spacings."""
        lo, hi = self.params.window
        offset = steps * self.h
        params = ModelParams.build(self.coupling, (lo + offset, hi + offset), self.h)
        return LatticeModel(params, self.integrator, self.t_order, self.tree_integrator.max_nodes,
                            self.verbose)

    # -------------------------------------------------------------------------
    # core expectation
    # -------------------------------------------------------------------------

    def _expect(self, region, config, J, insertion_sets):
        """
        Tree-expanded expectations for each insertion multiset:
        Σ_η ∫dt ∏t^e Σ_y ∏ h^{-d}C_{x_j y_j} E_{t;x'}[∂^D (∏_ins φ e^{W_region})].
        """
        region = np.array(sorted({int(s) for s in region}), dtype=int)
        n = config.n
        if n < 1:
            raise DomainError("need at least one configuration point")
        if n > MAX_TREE_POINTS:
            raise CapabilityError(f"tree quantities supported for n <= {MAX_TREE_POINTS}")
        integrator = self.integrator if n == 1 else self.tree_integrator
        if integrator.method == "tensor" and len(region) > MAX_TENSOR_SITES:
            raise CapabilityError(f"tensor quadrature supports at most {MAX_TENSOR_SITES} sites")
        J = self._source(J)
        canon = [tuple(sorted(int(s) for s in ins)) for ins in insertion_sets]
        key = (tuple(region), config.as_tuple() if n > 1 else (), tuple(J[region]),
               integrator.key(), self.t_order)
        cached = self._cache.setdefault(key, {})
        missing = sorted({ins for ins in canon if ins not in cached})
        if missing:
            cached.update(self._evaluate(region, config, J, missing, integrator))
        return [cached[ins] for ins in canon]

    def _tree_terms(self, config, local, entries, labels):
        """Per tree: (t exponents, {derivative multiset: coefficient})."""
        n = config.n
        xs = []
        for j in range(1, n):
            s = self._site_or_none(config[j])
            if s is None or s not in local:
                return None
            xs.append(local[s])

        table = []
        for tree in enumerate_trees(n):
            choices = []
            for j in range(2, n + 1):
                xj = xs[j - 2]
                ys = np.flatnonzero(labels == tree.eta(j))
                choices.append([(xj, int(y), entries[xj, y] / self.hd) for y in ys])
            terms = {}
            for combo in itertools.product(*choices):
                D = tuple(sorted(s for xj, y, _ in combo for s in (xj, y)))
                coef = math.prod(c for _, _, c in combo)
                terms[D] = terms.get(D, 0.0) + coef
            table.append((np.asarray(t_exponents(tree), dtype=float), terms))
        return table

    def _evaluate(self, region, config, J, insertion_sets, integrator):
        local = {int(s): i for i, s in enumerate(region)}
        zero = Estimate(0.0, 0.0, integrator.method)
        results = {}
        valid = []
        for ins in insertion_sets:
            if all(s in local for s in ins):
                valid.append(ins)
            else:
                results[ins] = zero
        if not valid:
            return results

        n = config.n
        entries = self.base.entries[np.ix_(region, region)]
        j_local = J[region]
        if n == 1:
            table = [(np.zeros(0), {(): 1.0})]
            labels = np.zeros(len(region), dtype=int)
            t_nodes, t_weights = np.zeros((1, 0)), np.ones(1)
        else:
            labels = shell_labels(config.prefix(n - 1), self.grid.sites[region]) if len(region) \
                else np.zeros(0, dtype=int)
            table = self._tree_terms(config, local, entries, labels)
            if table is None:
                results.update({ins: zero for ins in valid})
                return results
            t_nodes, t_weights = legendre_rule(self.t_order, n - 1)

        ins_counts = {ins: Counter(local[s] for s in ins) for ins in valid}
        acc = {ins: 0.0 for ins in valid}
        weights = None
        for t, wt in zip(t_nodes, t_weights):
            cov = entries if n == 1 else _closed_form_entries(entries, labels, t)
            phi, weights = integrator.field(cov)
            exp_w = np.exp(self.hd * np.sum(-self.coupling * phi ** 4 + j_local * phi, axis=1))

            d_coef = {}
            for e, terms in table:
                tw = float(np.prod(t ** e))
                if tw == 0.0:
                    continue
                for D, c in terms.items():
                    d_coef[D] = d_coef.get(D, 0.0) + tw * c

            factors = {}
            for ins in valid:
                total = np.zeros(len(weights))
                for D, c in d_coef.items():
                    if c == 0.0:
                        continue
                    d_counts = Counter(D)
                    term = np.full(len(weights), c)
                    for s in sorted(set(ins_counts[ins]) | set(d_counts)):
                        k, m = ins_counts[ins].get(s, 0), d_counts.get(s, 0)
                        fkey = (s, k, m)
                        if fkey not in factors:
                            factors[fkey] = self._polynomial(k, m, j_local[s])(phi[:, s])
                        term = term * factors[fkey]
                    total += term
                acc[ins] = acc[ins] + wt * total * exp_w

        for ins in valid:
            results[ins] = integrator.reduce(acc[ins], weights)
        return results

    # -------------------------------------------------------------------------
    # partition functions and interacting quantities
    # -------------------------------------------------------------------------

    def partition_function(self, J=None, region=None):
        """Z_R[J]; R defaults to the whole window."""
        region = self.all_sites() if region is None else region
        anchor = self.config([self.grid.sites[0, 0]])
        return self._expect(region, anchor, J, [()])[0]

    def moments(self, sites, J=None, region=None):
        """Unnormalized E[∏φ e^{W}] for each multiset in `sites`."""
        region = self.all_sites() if region is None else region
        anchor = self.config([self.grid.sites[0, 0]])
        return self._expect(region, anchor, J, sites)

    def ztilde(self, config, J=None):
        """Z̃_{Λ;x_1..x_n} through the ordered-tree sum."""
        if config.n == 0:
            raise DomainError("ztilde needs n >= 1")
        return self._expect(self.all_sites(), config, J, [()])[0]

    def zbold(self, config, region=None, J=None, insertions=((),)):
        """
        Z_bold with the interaction (and source) restricted to region ∩ B_x,
        one value per insertion multiset; an insertion at w is the J_w
        derivative at the given source.
        """
        if config.n == 0:
            raise DomainError("zbold needs n >= 1")
        return self._expect(self.ball_sites(config, region), config, J, list(insertions))

    # -------------------------------------------------------------------------
    # identities
    # -------------------------------------------------------------------------

    def identity13_residual(self, config, J=None):
        """
        |Z̃_{Λ;x} - Z_bold_{Λ;x} Z_{Λ\\B_x} - h Σ_{z ∈ Λ\\B_x} Z̃_{Λ;x,z}|.

        Terms with z outside Λ vanish identically: their Δ derivative acts on
        a field the integrand does not depend on.
        """
        if config.n not in (1, 2):
            raise DomainError("identity13_residual supports n in {1, 2}")
        lhs = self.ztilde(config, J)
        zb = self.zbold(config, J=J)[0]
        rest = self.partition_function(J, self.complement_sites(config))
        z_values = []
        for z in self.complement_sites(config):
            term = self.ztilde(config.extend(self.grid.sites[z]), J)
            z_values.append(term)
            if self.verbose:
                print(f"  z={self.grid.sites[z, 0]:+.3f}: Z~ = {term.value:+.6e}")
        z_sum = self.hd * sum(v.value for v in z_values)
        residual = abs(lhs.value - zb.value * rest.value - z_sum)

        mc = math.sqrt(lhs.error ** 2
                       + (abs(zb.value) * rest.error) ** 2 + (abs(rest.value) * zb.error) ** 2
                       + self.hd ** 2 * sum(v.error ** 2 for v in z_values))
        quad = QUAD_FLOOR * max(1.0, abs(lhs.value))
        errors = {"quadrature": quad, "monte_carlo": MC_SIGMAS * mc, "truncation": 0.0}
        return Identity13Report(lhs.value, zb.value * rest.value, z_sum, residual,
                                sum(errors.values()), errors)

    def _chains(self, region, anchor, depth):
        """Chains (z_1..z_m), m <= depth, with z_{j+1} ∈ region \\ B_{z_1..z_j}."""
        levels = [[(int(anchor),)]]
        for _ in range(depth):
            nxt = []
            for chain in levels[-1]:
                cfg = self.config(self.grid.sites[list(chain), 0])
                for z in self.complement_sites(cfg, region):
                    nxt.append(chain + (int(z),))
            levels.append(nxt)
        return levels

    def expansion14_check(self, depth, config=None, anchor=None):
        """
        Rebuild Z_R, R = Λ \\ B_x, from Σ_m h^{m-1} Σ_z Z_bold_{R;z} Z_{R\\B_z}
        truncated at chain length `depth`; residual after each depth.
        """
        if not 1 <= depth <= MAX_EXPANSION_DEPTH:
            raise CapabilityError(f"depth must be in 1..{MAX_EXPANSION_DEPTH}")
        config = config or PointConfiguration([], 1)
        region = self.complement_sites(config)
        target = self.partition_function(region=region).value
        if len(region) == 0:
            return Expansion14Report(target, [1.0] * depth, [abs(target - 1.0)] * depth,
                                     [0] * depth, True)
        anchor = region[0] if anchor is None else self.site(anchor)
        if anchor not in set(region.tolist()):
            raise DomainError("anchor must lie in Λ \\ B_x")
        levels = self._chains(region, anchor, depth)

        partial, residuals, counts = [], [], []
        running = 0.0
        for m in range(1, depth + 1):
            level_sum = 0.0
            for chain in levels[m - 1]:
                cfg = self.config(self.grid.sites[list(chain), 0])
                zb = self.zbold(cfg, region)[0].value
                rest = self.partition_function(region=self.complement_sites(cfg, region)).value
                level_sum += self.hd ** (m - 1) * zb * rest
            running += level_sum
            partial.append(running)
            residuals.append(abs(target - running))
            counts.append(len(levels[m - 1]))
            if self.verbose:
                print(f"  depth {m}: {counts[-1]} chains, residual {residuals[-1]:.3e}")
        return Expansion14Report(target, partial, residuals, counts, len(levels[depth]) == 0)

    def one_point_bound_check(self, c1):
        """
        max_z |Z_bold_{Λ;z} - 1| against 3 c₁² v λ, v the lattice volume of a
        closed unit ball. Returns (max deviation, bound).
        """
        volume = self.hd * (2.0 / self.h + 1.0)
        bound = 3.0 * c1 ** 2 * volume * self.coupling
        worst = 0.0
        for s in self.all_sites():
            cfg = self.config([self.grid.sites[s, 0]])
            worst = max(worst, abs(self.zbold(cfg)[0].value - 1.0))
        return worst, bound

    # -------------------------------------------------------------------------
    # Schwinger functions
    # -------------------------------------------------------------------------

    def _request_sites(self, req):
        if req.r > MAX_SCHWINGER_ORDER:
            raise CapabilityError(f"Schwinger functions supported for r <= {MAX_SCHWINGER_ORDER}")
        return [self.site(p) for p in req.points]

    def _cumulant(self, sites, integrator_model):
        r = len(sites)
        subsets = [tuple(c) for k in range(r + 1) for c in itertools.combinations(range(r), k)]
        values = integrator_model.moments([tuple(sites[i] for i in sub) for sub in subsets])
        table = dict(zip(subsets, (v.value for v in values)))
        z = table[()]
        return cumulant_from_moments(r, lambda block: table[block] / z)

    def schwinger_bruteforce(self, req):
        """
        Connected S^c_r(w_1..w_r) at J = 0 from exact polynomial insertions:
        raw moments E[∏φ e^{-V}]/Z combined into a cumulant. Monte Carlo
        errors come from independent batches.
        """
        sites = self._request_sites(req)
        if not self.integrator.stochastic:
            return Estimate(self._cumulant(sites, self), 0.0, "tensor")
        children = np.random.SeedSequence(self.integrator.seed).spawn(MC_BATCHES)
        values = []
        for child in children:
            batch = GaussianIntegrator("mc", samples=max(2, self.integrator.samples // MC_BATCHES),
                                       seed=int(child.generate_state(1)[0]),
                                       threads=self.integrator.threads)
            values.append(self._cumulant(sites, LatticeModel(self.params, batch, self.t_order)))
        values = np.asarray(values)
        return Estimate(float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values))), "mc")

    def schwinger_difference(self, req, eps=FD_STEP):
        """Nested central differences of ln Z[J] in u = h^d J at the request sites."""
        sites = self._request_sites(req)
        total = 0.0
        for signs in itertools.product((1, -1), repeat=len(sites)):
            u = np.zeros(self.n_sites)
            for s, sign in zip(sites, signs):
                u[s] += sign * eps
            total += math.prod(signs) * math.log(self.partition_function(u / self.hd).value)
        return total / (2.0 * eps) ** len(sites)

    def first_order_schwinger(self, w1, w2):
        """C_{w1 w2} - 12 λ h^d Σ_z C_{w1 z} C_{zz} C_{z w2}."""
        a, b = self.site(w1), self.site(w2)
        C = self.base.entries
        correction = np.sum(C[a, :] * np.diag(C) * C[:, b])
        return float(C[a, b] - 12.0 * self.coupling * self.hd * correction)
