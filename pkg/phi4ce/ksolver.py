"""
Kirkwood-Salzburg fixed point for the sequence functions f_r.

1. ConfigSpace: admissible lattice configurations x ∈ 𝒳_n, n <= N_max, in
   the window; SequenceFunction: tables f_{r; w; x} over (x, w ∈ W^r)
2. A₀, A_s, T_s as scipy.sparse matrices assembled from Z_bold tables of the
   model, with chains z_1..z_m (m <= M_max) on the window lattice
3. solve_fixed_point(): Picard iteration for f₀ = e + A₀f₀, then
   (1 - A₀)f_r = Σ_s A_s f_{r-s} for r = 1, 2
4. schwinger_expansion(): S^c_r = Σ_s T_s f_{r-s}
5. Norms: weighted sup norms 2^{1-n}e^{ℓ_{w;x}}/r! and e^{ℓ_w/2}/r!, exact
   induced operator norms of the finite matrices and witness batteries

The operators are the finite-window ones: with no truncation the fixed
point is exactly f_x = Z_{Λ\\B_x}/Z_Λ. Terms that would need configurations
longer than N_max are dropped and counted.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import sparse, stats

from phi4ce.errors import CapabilityError, DomainError, NonContractionError
from phi4ce.gaussian import GaussianIntegrator
from phi4ce.geometry import set_tree_length
from phi4ce.model import MAX_TREE_POINTS, LatticeModel, ModelParams

# =============================================================================
# CONFIGURATION
# =============================================================================

DEFAULT_WINDOW = (0.0, 3.0)
DEFAULT_NMAX = 3
DEFAULT_MMAX = 3
DEFAULT_TOL = 1e-12
MAX_ITERATIONS = 200
NOISE_FLOOR = 1e-12          # residuals below this never count as non-contraction
MAX_ARITY = 2
BATTERY_SIZE = 64
CONTRACTION_TARGET = 0.75
CHECKPOINT_VERSION = 1
QUAD_TOL = 1e-8              # absolute tolerance for expansion vs brute force (tensor)
MC_SIGMAS = 3.0
SATURATION_TOL = 1e-2        # relative change of S^c_2 allowed when the window doubles


@dataclass(frozen=True)
class KSConfig:
    coupling: float = 0.02
    h: float = 1.0
    window: tuple = DEFAULT_WINDOW
    n_max: int = DEFAULT_NMAX
    m_max: int = DEFAULT_MMAX
    tol: float = DEFAULT_TOL
    max_iterations: int = MAX_ITERATIONS
    method: str = "tensor"
    quadrature_order: int = 40
    max_nodes: int = 200_000
    t_order: int = 8
    mc_samples: int = 200_000
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_max < 2 or self.m_max < 2:
            raise DomainError("N_max and M_max must be >= 2")
        if self.n_max > MAX_TREE_POINTS or self.m_max > MAX_TREE_POINTS:
            raise CapabilityError(f"N_max and M_max are limited to {MAX_TREE_POINTS}")
        if not self.tol > 0:
            raise DomainError("tol must be > 0")
        object.__setattr__(self, "window", tuple(float(v) for v in self.window))

    def integrator(self):
        return GaussianIntegrator(self.method, self.quadrature_order, self.max_nodes,
                                  self.mc_samples, self.seed, self.threads)

    def model(self):
        params = ModelParams.build(self.coupling, self.window, self.h)
        return LatticeModel(params, self.integrator(), self.t_order)

    def to_dict(self):
        out = asdict(self)
        out["window"] = list(self.window)
        return out


class ConfigSpace:
    """Admissible ordered configurations of window sites, by length then lexicographically."""

    def __init__(self, model, n_max):
        self.model = model
        self.n_max = n_max
        self.sites = model.grid.sites[:, 0]
        self.n_w = len(self.sites)
        rows = [(s,) for s in range(self.n_w)]
        frontier = list(rows)
        for _ in range(n_max - 1):
            frontier = [row + (int(z),) for row in frontier
                        for z in model.complement_sites(self.config(row))]
            rows.extend(frontier)
        self.rows = rows
        self.index = {row: i for i, row in enumerate(rows)}
        self._weights = {}

    def __len__(self):
        return len(self.rows)

    def config(self, row):
        return self.model.config(self.sites[list(row)])

    def length(self, i):
        return len(self.rows[i])

    def w_tuples(self, r):
        return list(itertools.product(range(self.n_w), repeat=r))

    def w_index(self, w):
        if not w:
            return 0
        return int(np.ravel_multi_index(w, (self.n_w,) * len(w)))

    def tree_length(self, w, row):
        """ℓ_{w;x}: set-terminal tree length of the singletons w and the set x; 0 for r = 0."""
        if not w:
            return 0.0
        sets = [[[self.sites[k]]] for k in w] + [[[self.sites[s]] for s in row]]
        return set_tree_length(sets, steiner=True)

    def weights(self, r):
        """2^{1-n} e^{ℓ_{w;x}} per flattened (x, w) entry."""
        if r not in self._weights:
            out = np.empty(len(self) * self.n_w ** r)
            for i, row in enumerate(self.rows):
                scale = 2.0 ** (1 - len(row))
                for k, w in enumerate(self.w_tuples(r)):
                    out[i * self.n_w ** r + k] = scale * math.exp(self.tree_length(w, row))
            self._weights[r] = out
        return self._weights[r]

    def prime_weights(self, r):
        """e^{ℓ_w / 2} per w-tuple."""
        return np.array([math.exp(0.5 * set_tree_length([[[self.sites[k]]] for k in w], steiner=True))
                         if w else 1.0 for w in self.w_tuples(r)])


class SequenceFunction:
    """f_{w; x} for w ∈ W^arity and x in the configuration space."""

    def __init__(self, space, arity, values=None):
        self.space = space
        self.arity = int(arity)
        shape = (len(space), space.n_w ** self.arity)
        self.values = np.zeros(shape) if values is None else np.asarray(values, dtype=float).reshape(shape)

    @classmethod
    def unit(cls, space):
        """e: 1 on 𝒳₁, 0 elsewhere."""
        f = cls(space, 0)
        for i, row in enumerate(space.rows):
            if len(row) == 1:
                f.values[i, 0] = 1.0
        return f

    @classmethod
    def constant(cls, space, arity, value=1.0):
        return cls(space, arity, np.full((len(space), space.n_w ** arity), float(value)))

    def flat(self):
        return self.values.reshape(-1)

    def with_flat(self, flat):
        return SequenceFunction(self.space, self.arity, flat)

    def value(self, row, w=()):
        return float(self.values[self.space.index[tuple(row)], self.space.w_index(tuple(w))])

    def scaled(self, c):
        return SequenceFunction(self.space, self.arity, c * self.values)

    def __sub__(self, other):
        return SequenceFunction(self.space, self.arity, self.values - other.values)


def norm_r(f):
    """‖f‖_r = (1/r!) max 2^{1-n} e^{ℓ_{w;x}} |f_{w;x}|."""
    if f.values.size == 0:
        return 0.0
    weighted = f.space.weights(f.arity) * np.abs(f.flat())
    return float(np.max(weighted)) / math.factorial(f.arity)


def norm_prime(g, space, r):
    """‖g‖'_r = (1/r!) max e^{ℓ_w/2} |g_w| for g indexed by W^r."""
    g = np.asarray(g, dtype=float).reshape(-1)
    return float(np.max(space.prime_weights(r) * np.abs(g))) / math.factorial(r)


@dataclass
class NormEstimate:
    exact: float
    battery: float
    battery_size: int
    witness: int


@dataclass
class NormReport:
    norms: dict = field(default_factory=dict)
    operators: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)
    c_hat: float = 0.0
    pattern_holds: bool = False
    saturation: dict = field(default_factory=dict)


@dataclass
class SaturationReport:
    window: tuple
    doubled_window: tuple
    max_abs_change: float
    relative_change: float
    pairs: int

    def holds(self, tol=SATURATION_TOL):
        return self.relative_change <= tol


@dataclass
class FixedPointResult:
    f: dict
    iterations: dict
    residuals: dict
    ratios: dict
    truncation: dict


def induced_norm(matrix, row_weights, col_weights, r_in, r_out):
    """Exact ‖M‖ between weighted sup norms: (r_in!/r_out!) max_y ω(y) Σ_e |M_ye| / ω(e)."""
    M = sparse.csr_matrix(matrix)
    if M.nnz == 0:
        return 0.0, 0
    scaled = sparse.diags(row_weights) @ abs(M) @ sparse.diags(1.0 / col_weights)
    sums = np.asarray(scaled.sum(axis=1)).reshape(-1)
    y = int(np.argmax(sums))
    return float(sums[y]) * math.factorial(r_in) / math.factorial(r_out), y


def operator_norm_estimate(matrix, row_weights, col_weights, r_in, r_out,
                           battery=BATTERY_SIZE, seed=0):
    """
    Battery lower bound on ‖M‖ over unit-norm inputs: random sign patterns,
    single-entry witnesses and the sign witness of the maximizing row, which
    attains the exact induced norm.
    """
    M = sparse.csr_matrix(matrix)
    exact, y = induced_norm(M, row_weights, col_weights, r_in, r_out)
    if M.nnz == 0:
        return NormEstimate(0.0, 0.0, 0, 0)
    scale = math.factorial(r_in) / col_weights

    def out_norm(f):
        return float(np.max(row_weights * np.abs(M @ f))) / math.factorial(r_out)

    rng = np.random.default_rng(seed)
    best, count = 0.0, 0
    for _ in range(battery):
        best = max(best, out_norm(scale * rng.choice((-1.0, 1.0), size=M.shape[1])))
        count += 1
    for e in rng.choice(M.shape[1], size=min(battery, M.shape[1]), replace=False):
        f = np.zeros(M.shape[1])
        f[e] = scale[e]
        best = max(best, out_norm(f))
        count += 1
    row = M.getrow(y).toarray().reshape(-1)
    best = max(best, out_norm(scale * np.sign(row)))
    count += 1
    return NormEstimate(exact, best, count, y)


class KSSolver:
    """Operators, fixed point and Schwinger reconstruction for one KSConfig."""

    def __init__(self, ks, model=None, verbose=False):
        self.ks = ks
        self.model = model or ks.model()
        self.space = ConfigSpace(self.model, ks.n_max)
        self.h = self.model.hd
        self.verbose = verbose
        self._zb = {}
        self._terms = None
        self._matrices = {}
        self.truncation = {"dropped_terms": 0, "dropped_magnitude": 0.0,
                           "last_m_magnitude": 0.0, "open_chains": 0}

    # -------------------------------------------------------------------------
    # Z_bold tables
    # -------------------------------------------------------------------------

    def zb_table(self, region, chain):
        """{insertion multiset: Z_bold_{s, region; w; chain}} for |w| <= MAX_ARITY."""
        key = (tuple(region), tuple(chain))
        if key not in self._zb:
            cfg = self.space.config(chain)
            ball = self.model.ball_sites(cfg, np.asarray(region, dtype=int))
            inserts = [()] + [tuple(c) for s in range(1, MAX_ARITY + 1)
                              for c in itertools.combinations_with_replacement(ball.tolist(), s)]
            values = self.model.zbold(cfg, np.asarray(region, dtype=int), insertions=inserts)
            self._zb[key] = {ins: v.value for ins, v in zip(inserts, values)}
        return self._zb[key]

    def _chains(self, exclude, start, depth):
        """Chains (start, z_2..z_m), m <= depth, z_{j+1} outside B of exclude + chain so far."""
        chains = [(start,)]
        frontier = [(start,)]
        for _ in range(depth - 1):
            nxt = []
            for chain in frontier:
                cfg = self.space.config(exclude + chain)
                nxt.extend(chain + (int(z),) for z in self.model.complement_sites(cfg))
            chains.extend(nxt)
            frontier = nxt
        return chains, frontier

    def terms(self):
        """Per row (x, z₁): list of (m, chain, column row or None, region, h^{m-1} Z_bold table)."""
        if self._terms is not None:
            return self._terms
        all_sites = self.model.all_sites()
        out = []
        for row in self.space.rows:
            x, z1 = row[:-1], row[-1]
            region = tuple(self.model.complement_sites(self.space.config(x)).tolist()) if x \
                else tuple(all_sites.tolist())
            chains, last = self._chains(x, z1, self.ks.m_max)
            for chain in last:
                if len(chain) == self.ks.m_max and len(
                        self.model.complement_sites(self.space.config(x + chain))):
                    self.truncation["open_chains"] += 1
            row_terms = []
            for chain in chains:
                m = len(chain)
                table = self.zb_table(region, chain)
                coef = self.h ** (m - 1)
                column = self.space.index.get(x + chain)
                magnitude = coef * max(abs(v) for v in table.values())
                if m == self.ks.m_max:
                    self.truncation["last_m_magnitude"] = max(self.truncation["last_m_magnitude"], magnitude)
                if column is None:
                    self.truncation["dropped_terms"] += 1
                    self.truncation["dropped_magnitude"] = max(self.truncation["dropped_magnitude"], magnitude)
                    continue
                row_terms.append((m, chain, column, coef, table))
            out.append(row_terms)
        self._terms = out
        return out

    # -------------------------------------------------------------------------
    # operators
    # -------------------------------------------------------------------------

    def a0(self):
        """Linear part of A₀ (rows x config rows) and the unit function e."""
        if "a0" not in self._matrices:
            rows, cols, vals = [], [], []
            for i, row_terms in enumerate(self.terms()):
                x = self.space.rows[i][:-1]
                if x:
                    rows.append(i)
                    cols.append(self.space.index[x])
                    vals.append(1.0)
                for m, chain, column, coef, table in row_terms:
                    zb = table[()] - 1.0 if m == 1 else table[()]
                    if zb != 0.0:
                        rows.append(i)
                        cols.append(column)
                        vals.append(-coef * zb)
            n = len(self.space)
            self._matrices["a0"] = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self._matrices["a0"]

    def a0_arity(self, r):
        if ("a0", r) not in self._matrices:
            self._matrices[("a0", r)] = sparse.kron(self.a0(), sparse.identity(self.space.n_w ** r),
                                                    format="csr")
        return self._matrices[("a0", r)]

    def a_s(self, s, r):
        """A_s from arity r - s to arity r; the zero matrix when s > r."""
        if s < 1:
            raise DomainError("A_s needs s >= 1")
        nw = self.space.n_w
        n = len(self.space)
        if s > r:
            return sparse.csr_matrix((n * nw ** r, n * nw ** max(r - s, 0)))
        if ("a", s, r) not in self._matrices:
            rows, cols, vals = [], [], []
            subsets = list(itertools.combinations(range(r), s))
            for i, row_terms in enumerate(self.terms()):
                for m, chain, column, coef, table in row_terms:
                    for k, w in enumerate(self.space.w_tuples(r)):
                        for I in subsets:
                            ins = tuple(sorted(w[a] for a in I))
                            zb = table.get(ins, 0.0)
                            if zb == 0.0:
                                continue
                            rest = tuple(w[a] for a in range(r) if a not in I)
                            rows.append(i * nw ** r + k)
                            cols.append(column * nw ** (r - s) + self.space.w_index(rest))
                            vals.append(-coef * zb)
            self._matrices[("a", s, r)] = sparse.csr_matrix(
                (vals, (rows, cols)), shape=(n * nw ** r, n * nw ** (r - s)))
        return self._matrices[("a", s, r)]

    def t_s(self, s, r):
        """T_s from arity r - s to functions of w ∈ W^r, with x₁ = w₁ and 1 ∈ I."""
        if not 1 <= s <= r:
            raise DomainError("T_s needs 1 <= s <= r")
        if ("t", s, r) not in self._matrices:
            nw = self.space.n_w
            region = tuple(self.model.all_sites().tolist())
            subsets = [I for I in itertools.combinations(range(r), s) if 0 in I]
            rows, cols, vals = [], [], []
            for k, w in enumerate(self.space.w_tuples(r)):
                chains, _ = self._chains((), w[0], self.ks.n_max)
                for chain in chains:
                    table = self.zb_table(region, chain)
                    coef = self.h ** (len(chain) - 1)
                    column = self.space.index[chain]
                    for I in subsets:
                        ins = tuple(sorted(w[a] for a in I))
                        zb = table.get(ins, 0.0)
                        if zb == 0.0:
                            continue
                        rest = tuple(w[a] for a in range(r) if a not in I)
                        rows.append(k)
                        cols.append(column * nw ** (r - s) + self.space.w_index(rest))
                        vals.append(coef * zb)
            self._matrices[("t", s, r)] = sparse.csr_matrix(
                (vals, (rows, cols)), shape=(nw ** r, len(self.space) * nw ** (r - s)))
        return self._matrices[("t", s, r)]

    def apply_A0(self, f):
        """A₀f for f of any arity; A₀ acts on the configuration index only."""
        return f.with_flat(self.a0_arity(f.arity) @ f.flat())

    def apply_As(self, f, s, r):
        if s <= r and f.arity != r - s:
            raise DomainError(f"A_{s} into arity {r} needs input arity {r - s}")
        if s > r:
            return SequenceFunction(self.space, r)
        return SequenceFunction(self.space, r, self.a_s(s, r) @ f.flat())

    def apply_T(self, f, s, r):
        """T_s f as a flat vector over W^r."""
        if f.arity != r - s:
            raise DomainError(f"T_{s} into arity {r} needs input arity {r - s}")
        return self.t_s(s, r) @ f.flat()

    # -------------------------------------------------------------------------
    # fixed point
    # -------------------------------------------------------------------------

    def picard(self, rhs, arity, initial=None, label=""):
        """
        Iterate f <- rhs + A₀f until ‖f_{k+1} - f_k‖_r < tol. The residual
        ratio must stay below 1 while the residual is above NOISE_FLOOR.
        """
        A = self.a0_arity(arity)
        f = initial.flat().copy() if initial is not None else (
            np.ones(len(rhs)) if arity == 0 else np.zeros(len(rhs)))
        residuals, ratios = [], []
        if self.verbose:
            print(f"Picard iteration {label}:")
        for its in range(1, self.ks.max_iterations + 1):
            nxt = rhs + A @ f
            res = norm_r(SequenceFunction(self.space, arity, nxt - f))
            residuals.append(res)
            if len(residuals) > 1 and residuals[-2] > 0.0:
                ratios.append(res / residuals[-2])
            f = nxt
            if self.verbose:
                ratio = f"{ratios[-1]:.4f}" if ratios else "-"
                print(f"... Iteration {its}: residual = {res:.3e}, ratio = {ratio}")
            if res < self.ks.tol:
                if self.verbose:
                    print("... Converged.")
                return SequenceFunction(self.space, arity, f), its, residuals, ratios
            if ratios and ratios[-1] >= 1.0 and res > NOISE_FLOOR:
                raise NonContractionError(
                    f"residual ratio {ratios[-1]:.4f} >= 1 at iteration {its}", residuals)
        raise NonContractionError(f"Limit of {self.ks.max_iterations} iterations exceeded.", residuals)

    def solve(self, r_max=MAX_ARITY, initial=None):
        if not 0 <= r_max <= MAX_ARITY:
            raise CapabilityError(f"r_max must be in 0..{MAX_ARITY}")
        f, iterations, residuals, ratios = {}, {}, {}, {}
        e = SequenceFunction.unit(self.space).flat()
        f[0], iterations[0], residuals[0], ratios[0] = self.picard(e, 0, initial, "r=0")
        for r in range(1, r_max + 1):
            rhs = np.zeros(len(self.space) * self.space.n_w ** r)
            for s in range(1, r + 1):
                rhs += self.a_s(s, r) @ f[r - s].flat()
            f[r], iterations[r], residuals[r], ratios[r] = self.picard(rhs, r, label=f"r={r}")
        self.terms()
        return FixedPointResult(f, iterations, residuals, ratios, dict(self.truncation))

    def schwinger(self, result, r):
        """S^c_r(w) = Σ_s (T_s f_{r-s})(w) for all w ∈ W^r."""
        if not 1 <= r <= MAX_ARITY or any(r - s not in result.f for s in range(1, r + 1)):
            raise CapabilityError(f"Schwinger reconstruction supported for r <= {MAX_ARITY}")
        out = np.zeros(self.space.n_w ** r)
        for s in range(1, r + 1):
            out += self.apply_T(result.f[r - s], s, r)
        return out

    # -------------------------------------------------------------------------
    # norms
    # -------------------------------------------------------------------------

    def operator_norms(self, seed=0):
        """Exact and battery norms of A₀ (arities 0..2), A_1, A_2 and T_1, T_2."""
        sp = self.space
        out = {}
        for r in range(MAX_ARITY + 1):
            out[f"A0[{r}]"] = operator_norm_estimate(self.a0_arity(r), sp.weights(r), sp.weights(r),
                                                     r, r, seed=seed)
        for s, r in ((1, 1), (1, 2), (2, 2)):
            out[f"A{s}[{r - s}->{r}]"] = operator_norm_estimate(
                self.a_s(s, r), sp.weights(r), sp.weights(r - s), r - s, r, seed=seed)
            out[f"T{s}[{r - s}->{r}]"] = operator_norm_estimate(
                self.t_s(s, r), sp.prime_weights(r), sp.weights(r - s), r - s, r, seed=seed)
        return out

    def norm_report(self, result, seed=0, saturation=None):
        ops = self.operator_norms(seed)
        c_hat = max(ops["A1[0->1]"].exact, ops["A1[1->2]"].exact, math.sqrt(ops["A2[0->2]"].exact))
        norms = {r: norm_r(f) for r, f in result.f.items()}
        a0 = max(ops[f"A0[{r}]"].exact for r in range(MAX_ARITY + 1))
        pattern = a0 <= CONTRACTION_TARGET and all(
            norms[r] <= 4.0 * (5.0 * c_hat) ** r * (1.0 + 1e-12) for r in norms)
        return NormReport(norms=norms, operators={k: v.exact for k, v in ops.items()},
                          witnesses={k: v.witness for k, v in ops.items()},
                          c_hat=c_hat, pattern_holds=pattern,
                          saturation=asdict(saturation) if saturation is not None else {})

    def a0_bound_estimate(self, c1):
        """
        ½ + 3c₁²vλ + max_y Σ_{m>=2} 2^{m-1} h^{m-1} |Z_bold_{z_1..z_m}|, an upper
        estimate of ‖A₀‖_{0→0} assembled from the Z_bold tables.
        """
        volume = self.h * (2.0 / self.model.h + 1.0)
        tail = 0.0
        for row_terms in self.terms():
            total = sum(2.0 ** (m - 1) * coef * abs(table[()])
                        for m, _, _, coef, table in row_terms if m >= 2)
            tail = max(tail, total)
        return 0.5 + 3.0 * c1 ** 2 * volume * self.ks.coupling + tail

    def perturbative_f0(self, row):
        """1 + 3λh^d C₀₀² #(Λ ∩ B_x): first order of Z_{Λ\\B_x}/Z_Λ."""
        c00 = float(self.model.base.entries[0, 0])
        inside = len(self.model.ball_sites(self.space.config(row)))
        return 1.0 + 3.0 * self.ks.coupling * self.h * c00 ** 2 * inside


# =============================================================================
# MODULE-LEVEL OPERATIONS
# =============================================================================

@lru_cache(maxsize=8)
def solver_for(ks):
    return KSSolver(ks)


def apply_A0(f, ks):
    return solver_for(ks).apply_A0(f)


def apply_As(f, s, r, ks):
    return solver_for(ks).apply_As(f, s, r)


def apply_T(f, s, r, ks):
    return solver_for(ks).apply_T(f, s, r)


def solve_fixed_point(ks, r_max=MAX_ARITY, verbose=False, initial=None):
    solver = solver_for(ks)
    solver.verbose = verbose
    return solver.solve(r_max, initial)


def schwinger_expansion(req, ks, result=None):
    """S^c_r at the request points from the fixed point of `ks`."""
    if req.r > MAX_ARITY:
        raise CapabilityError(f"Schwinger reconstruction supported for r <= {MAX_ARITY}")
    solver = solver_for(ks)
    result = result or solver.solve(req.r - 1)
    sites = tuple(solver.model.site(p) for p in req.points)
    return float(solver.schwinger(result, req.r)[solver.space.w_index(sites)])


def compare_with_bruteforce(req, ks, result=None):
    """Expansion vs brute force with the tolerance split into quadrature, MC and truncation."""
    solver = solver_for(ks)
    expansion = schwinger_expansion(req, ks, result)
    brute = solver.model.schwinger_bruteforce(req)
    errors = {
        "quadrature": QUAD_TOL * max(1.0, abs(brute.value)),
        "monte_carlo": MC_SIGMAS * brute.error,
        "truncation": solver.truncation["dropped_magnitude"] + (
            solver.truncation["last_m_magnitude"] if solver.truncation["open_chains"] else 0.0),
    }
    return expansion, brute, errors


def doubled_window(window):
    lo, hi = window
    return (lo, lo + 2.0 * (hi - lo))


def window_saturation(ks, doubled=None):
    """
    Change of S^c_2 on the sites of `ks.window` when the window is doubled
    to the right at the same spacing. `doubled` may carry an already solved
    (KSSolver, FixedPointResult) pair for the doubled window.
    """
    wide_window = doubled_window(ks.window)
    narrow = KSSolver(ks)
    s_narrow = narrow.schwinger(narrow.solve(1), 2)
    if doubled is None:
        wide = KSSolver(replace(ks, window=wide_window))
        doubled = (wide, wide.solve(1))
    wide, wide_result = doubled
    if not np.allclose(wide.ks.window, wide_window) or wide.ks.h != ks.h:
        raise DomainError(f"doubled solver has window {wide.ks.window}, expected {wide_window}")
    s_wide = wide.schwinger(wide_result, 2)

    index = [wide.model.site(x) for x in narrow.space.sites]
    n_w, n_wide = narrow.space.n_w, wide.space.n_w
    worst = 0.0
    for a, b in itertools.product(range(n_w), repeat=2):
        change = abs(s_wide[index[a] * n_wide + index[b]] - s_narrow[a * n_w + b])
        worst = max(worst, float(change))
    scale = float(np.max(np.abs(s_narrow)))
    return SaturationReport(tuple(ks.window), wide_window, worst, worst / scale if scale > 0.0 else 0.0,
                            n_w * n_w)


def decay_fit(separations, values):
    """Least-squares slope of log|S| against separation, with its standard error."""
    separations = np.asarray(separations, dtype=float)
    values = np.abs(np.asarray(values, dtype=float))
    if len(separations) < 3 or np.any(values <= 0.0):
        raise DomainError("decay_fit needs >= 3 nonzero values")
    fit = stats.linregress(separations, np.log(values))
    return float(fit.slope), float(fit.intercept), float(fit.stderr)


def save_checkpoint(path, ks, result):
    state = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": ks.to_dict(),
        "iterations": {str(r): n for r, n in result.iterations.items()},
        "residuals": {str(r): list(v) for r, v in result.residuals.items()},
        "tables": {str(r): f.values.tolist() for r, f in result.f.items()},
    }
    with open(path, "w") as fh:
        json.dump(state, fh, sort_keys=True, indent=2)


def load_checkpoint(path, ks=None):
    """(KSConfig, {arity: SequenceFunction}) from a checkpoint file."""
    with open(path) as fh:
        state = json.load(fh)
    if state.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {state.get('checkpoint_version')}")
    cfg = dict(state["config"])
    cfg["window"] = tuple(cfg["window"])
    loaded = KSConfig(**cfg)
    if ks is not None and ks != loaded:
        raise DomainError("checkpoint was written for a different configuration")
    space = solver_for(loaded).space
    tables = {int(r): SequenceFunction(space, int(r), v) for r, v in state["tables"].items()}
    return loaded, tables
