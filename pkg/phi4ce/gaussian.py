"""
Finite-dimensional Gaussian engine on a lattice grid.

1. Grid / CovarianceMatrix: the kernel sampled on lattice sites; continuum
   integrals become h^d Σ_sites and δ/δφ_x becomes h^{-d} ∂/∂φ_site
2. interpolate(): the convex recursion between C and its ball/complement
   block form, plus the equivalent closed form
3. dcov_dt_last() and change_of_covariance_residual(): the t-derivative of
   the interpolated covariance and the Gaussian integration-by-parts check
4. wick_moment(): moments by perfect matchings and by integration by parts
5. Moment-bound scans and the (1+ξ)⁴ - 2ξ⁴ supremum
6. GaussianIntegrator: tensor Gauss-Hermite or seeded Monte Carlo
   expectations of functions of the field
"""

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import optimize

from phi4ce.covariance import KernelParams, covariance_matrix
from phi4ce.errors import CapabilityError, DomainError
from phi4ce.geometry import PointConfiguration, shell_labels

# =============================================================================
# CONFIGURATION
# =============================================================================

SITE_TOL = 1e-9              # coordinate match tolerance for lattice lookups
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10              # per dimension
MAX_WICK_DEGREE = 12
MAX_POLY_DEGREE = 8
FD_EPS = 1e-5                # central-difference step in t_n

HERMITE_ORDER = 40           # requested Gauss-Hermite order per site
MAX_TENSOR_NODES = 200_000   # node budget; the order is lowered to respect it
MIN_HERMITE_ORDER = 6
MC_SAMPLES = 200_000

LEMMA2_SAMPLES = 1_000_000
LEMMA2_MAX_R = 6
LEMMA2_MAX_N = 4


# =============================================================================
# GRID AND MATRICES
# =============================================================================

class Grid:
    """Lattice sites inside a window; cell volume h^d."""

    def __init__(self, sites, spacing, dimension=1):
        sites = np.asarray(sites, dtype=float)
        if sites.ndim == 1:
            sites = sites[:, None]
        if sites.shape[1] != dimension:
            raise DomainError(f"sites have dimension {sites.shape[1]}, expected {dimension}")
        if spacing <= 0:
            raise DomainError("grid spacing must be > 0")
        if len(np.unique(np.round(sites / (spacing * 1e-6)), axis=0)) != len(sites):
            raise DomainError("grid sites must be distinct")
        self.sites = sites
        self.sites.setflags(write=False)
        self.spacing = float(spacing)
        self.dimension = int(dimension)

    @classmethod
    def window(cls, lo, hi, spacing, dimension=1):
        """All lattice points lo + k h inside [lo, hi]^d."""
        count = int(math.floor((hi - lo) / spacing + SITE_TOL)) + 1
        axis = lo + spacing * np.arange(count)
        if dimension == 1:
            return cls(axis, spacing, 1)
        pts = np.array(list(itertools.product(axis, repeat=dimension)))
        return cls(pts, spacing, dimension)

    @property
    def cell_volume(self):
        return self.spacing ** self.dimension

    def __len__(self):
        return len(self.sites)

    def subset(self, indices):
        return Grid(self.sites[np.asarray(indices, dtype=int)], self.spacing, self.dimension)

    def index_of(self, point):
        """Index of the site at `point`, or None when it lies outside the grid."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        d = np.max(np.abs(self.sites - p), axis=1)
        k = int(np.argmin(d))
        return k if d[k] <= SITE_TOL * max(1.0, self.spacing) else None

    def lattice_offset(self, point):
        """True when `point` is on the lattice spanned by the grid (inside or not)."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        steps = (p - self.sites[0]) / self.spacing
        return bool(np.all(np.abs(steps - np.round(steps)) <= SITE_TOL))


@dataclass
class CovarianceMatrix:
    entries: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        n = len(self.grid)
        if self.entries.shape != (n, n):
            raise DomainError(f"matrix shape {self.entries.shape} does not match {n} sites")
        scale = max(1.0, float(np.max(np.abs(self.entries))) if n else 1.0)
        if n and np.max(np.abs(self.entries - self.entries.T)) > SYMMETRY_TOL * scale:
            raise DomainError("covariance matrix must be symmetric")

    @classmethod
    def from_kernel(cls, grid, params=None):
        params = params or KernelParams(dimension=grid.dimension)
        return cls(covariance_matrix(grid.sites, params), grid)

    @property
    def dim(self):
        return len(self.grid)

    def restrict(self, indices):
        idx = np.asarray(indices, dtype=int)
        return CovarianceMatrix(self.entries[np.ix_(idx, idx)], self.grid.subset(idx))

    def min_eigenvalue(self):
        if self.dim == 0:
            return 0.0
        return float(np.linalg.eigvalsh(self.entries)[0])

    def is_psd(self):
        return self.min_eigenvalue() >= -PSD_TOL * max(1, self.dim)

    def save(self, path):
        """Row-major entries plus a header of dimension, spacing and sites (.npz)."""
        np.savez(path, entries=np.ascontiguousarray(self.entries), dimension=self.grid.dimension,
                 spacing=self.grid.spacing, sites=self.grid.sites)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            grid = Grid(data["sites"], float(data["spacing"]), int(data["dimension"]))
            return cls(data["entries"], grid)


@dataclass
class InterpolationState:
    base: CovarianceMatrix
    config: PointConfiguration
    t: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        if len(self.t) != self.config.n:
            raise DomainError(f"need one t per point: |t|={len(self.t)}, n={self.config.n}")
        if np.any((self.t < 0.0) | (self.t > 1.0)):
            raise DomainError("interpolation parameters must lie in [0, 1]")

    @property
    def n(self):
        return self.config.n

    def labels(self):
        return shell_labels(self.config, self.base.grid.sites)


def _check_dims(base, config, t):
    t = np.asarray(t, dtype=float).reshape(-1)
    if len(t) != config.n:
        raise DomainError(f"need one t per point: |t|={len(t)}, n={config.n}")
    if config.n and config.dimension != base.grid.dimension:
        raise DomainError("configuration and grid dimensions differ")
    return t


def interpolate(base, config, t):
    """
    C_{t;x} by the recursion
    C_{t;x} = t_n C_{t';x'} + (1 - t_n)(χ_B C_{t';x'} χ_B + χ_{B^c} C χ_{B^c}).
    """
    t = _check_dims(base, config, t)
    labels = shell_labels(config, base.grid.sites)
    current = base.entries.copy()
    for k in range(1, config.n + 1):
        inside = ((labels >= 1) & (labels <= k)).astype(float)
        outside = 1.0 - inside
        blocked = (np.outer(inside, inside) * current
                   + np.outer(outside, outside) * base.entries)
        current = t[k - 1] * current + (1.0 - t[k - 1]) * blocked
    return CovarianceMatrix(current, base.grid)


def _closed_form_entries(entries, labels, t):
    """C_ab ∏_{l=min(k_a,k_b)}^{max(k_a,k_b)-1} t_l with k = n+1 outside B."""
    n = len(t)
    k = np.where(labels == 0, n + 1, labels)
    # table[a, b] = t_a ... t_{b-1}
    table = np.ones((n + 2, n + 2))
    for a in range(1, n + 2):
        run = 1.0
        for b in range(a + 1, n + 2):
            run *= t[b - 2]
            table[a, b] = run
            table[b, a] = run
    return entries * table[np.ix_(k, k)]


def interpolate_closed_form(base, config, t):
    t = _check_dims(base, config, t)
    labels = shell_labels(config, base.grid.sites)
    return CovarianceMatrix(_closed_form_entries(base.entries, labels, t), base.grid)


def dcov_dt_last(state):
    """∂C_{t;x}/∂t_n = Σ_k (∏_{l=k}^{n-1} t_l)(χ_{B'_k} C χ_{B^c} + χ_{B^c} C χ_{B'_k})."""
    n = state.n
    if n < 1:
        raise DomainError("dcov_dt_last needs n >= 1")
    labels = state.labels()
    outside = (labels == 0).astype(float)
    out = np.zeros_like(state.base.entries)
    for k in range(1, n + 1):
        coef = float(np.prod(state.t[k - 1:n - 1]))
        shell_k = (labels == k).astype(float)
        out += coef * (np.outer(shell_k, outside) + np.outer(outside, shell_k))
    return out * state.base.entries


# =============================================================================
# WICK MOMENTS
# =============================================================================

class Monomial:
    """∏_site φ_site^{s_site}, stored as a sorted tuple of (site, power)."""

    def __init__(self, exponents=None):
        if exponents is None:
            exponents = {}
        elif not isinstance(exponents, dict):
            counts = {}
            for site in exponents:
                counts[int(site)] = counts.get(int(site), 0) + 1
            exponents = counts
        for site, power in exponents.items():
            if power < 0:
                raise DomainError(f"negative exponent at site {site}")
        self.exponents = tuple(sorted((int(s), int(p)) for s, p in exponents.items() if p > 0))

    @property
    def degree(self):
        return sum(p for _, p in self.exponents)

    def legs(self):
        return [s for s, p in self.exponents for _ in range(p)]

    def as_dict(self):
        return dict(self.exponents)

    def derivative(self, site):
        """(coefficient, monomial) of ∂/∂φ_site."""
        d = self.as_dict()
        power = d.get(site, 0)
        if power == 0:
            return 0, Monomial()
        d[site] = power - 1
        return power, Monomial(d)

    def __eq__(self, other):
        return isinstance(other, Monomial) and self.exponents == other.exponents

    def __hash__(self):
        return hash(self.exponents)

    def __repr__(self):
        return f"Monomial({dict(self.exponents)})"


def _matrix(C):
    return C.entries if isinstance(C, CovarianceMatrix) else np.asarray(C, dtype=float)


def all_pairings(items):
    """Yield every perfect matching of `items` as a list of pairs."""
    items = list(items)
    if len(items) == 0:
        yield []
        return

    first = items.pop(0)
    for i, item in enumerate(items):
        for rest in all_pairings(items[:i] + items[i + 1:]):
            yield [(first, item)] + rest


def wick_moment(C, m):
    """⟨∏φ⟩ under N(0, C) as a sum over perfect matchings of the legs."""
    if m.degree > MAX_WICK_DEGREE:
        raise CapabilityError(f"wick_moment supports degree <= {MAX_WICK_DEGREE}")
    if m.degree % 2:
        return 0.0
    A = _matrix(C)
    total = 0.0
    for pairing in all_pairings(m.legs()):
        term = 1.0
        for a, b in pairing:
            term *= A[a, b]
        total += term
    return float(total)


def wick_moment_ibp(C, m):
    """
    Same moment by repeated Gaussian integration by parts,
    ⟨φ_a G⟩ = Σ_b C_ab ⟨∂_b G⟩, memoized on exponent vectors.
    """
    if m.degree > MAX_WICK_DEGREE:
        raise CapabilityError(f"wick_moment supports degree <= {MAX_WICK_DEGREE}")
    if m.degree % 2:
        return 0.0
    A = _matrix(C)
    sites = [s for s, _ in m.exponents]
    sub = A[np.ix_(sites, sites)]

    @lru_cache(maxsize=None)
    def moment(exps):
        if not any(exps):
            return 1.0
        a = next(i for i, e in enumerate(exps) if e)
        reduced = list(exps)
        reduced[a] -= 1
        total = 0.0
        for b, e in enumerate(reduced):
            if e:
                nxt = list(reduced)
                nxt[b] -= 1
                total += sub[a, b] * e * moment(tuple(nxt))
        return total

    return float(moment(tuple(p for _, p in m.exponents)))


def _as_polynomial(F):
    if isinstance(F, Monomial):
        return {F: 1.0}
    if F == 1 or F is None:
        return {Monomial(): 1.0}
    return dict(F)


def polynomial_moment(C, F):
    return sum(coef * wick_moment(C, mono) for mono, coef in _as_polynomial(F).items())


def _second_derivative(F, a, b):
    out = {}
    for mono, coef in F.items():
        ca, ma = mono.derivative(a)
        if ca == 0:
            continue
        cb, mb = ma.derivative(b)
        if cb == 0:
            continue
        out[mb] = out.get(mb, 0.0) + coef * ca * cb
    return out


def change_of_covariance_residual(state, F, eps=FD_EPS):
    """
    |d/dt_n ⟨F⟩_{t;x} - Σ_k (∏ t_l) ⟨∫_{B^c}dx ∫_{B'_k}dy C(x,y) δ²F/δφ_x δφ_y⟩|.

    The left side is a central difference of exact Wick moments in t_n,
    the right side the closed-form kernel on the lattice (h^{2d} from the
    two integrals, h^{-2d} from the two functional derivatives).
    """
    F = _as_polynomial(F)
    if any(m.degree > MAX_POLY_DEGREE for m in F):
        raise CapabilityError(f"polynomial degree must be <= {MAX_POLY_DEGREE}")
    n = state.n
    if n < 1:
        raise DomainError("change_of_covariance_residual needs n >= 1")
    labels = state.labels()
    base = state.base.entries

    def moment_at(tn):
        t = state.t.copy()
        t[-1] = tn
        return polynomial_moment(_closed_form_entries(base, labels, t), F)

    lhs = (moment_at(state.t[-1] + eps) - moment_at(state.t[-1] - eps)) / (2.0 * eps)

    current = _closed_form_entries(base, labels, state.t)
    h_d = state.base.grid.cell_volume
    rhs = 0.0
    outside = np.flatnonzero(labels == 0)
    involved = {s for mono in F for s, _ in mono.exponents}
    for k in range(1, n + 1):
        coef = float(np.prod(state.t[k - 1:n - 1]))
        shell_k = np.flatnonzero(labels == k)
        for a in outside:
            if a not in involved:
                continue
            for b in shell_k:
                if b not in involved:
                    continue
                d2 = _second_derivative(F, int(a), int(b))
                if d2:
                    rhs += coef * h_d * h_d * base[a, b] * h_d ** -2 * polynomial_moment(current, d2)
    return abs(lhs - rhs)


# =============================================================================
# MOMENT BOUNDS
# =============================================================================

def sqrt_factor(entries):
    """L with L Lᵀ = entries: Cholesky, or eigenvalues clipped at 0 when singular."""
    entries = np.asarray(entries, dtype=float)
    if entries.size == 0:
        return entries.reshape(0, 0)
    try:
        return np.linalg.cholesky(entries)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(entries)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gaussian_samples(C, n_samples, seed=0, threads=1):
    """Samples of N(0, C), shape (n_samples, dim); per-worker seeded streams."""
    L = sqrt_factor(_matrix(C))
    xi = standard_normal(L.shape[0], n_samples, seed, threads)
    return xi @ L.T


def standard_normal(dim, n_samples, seed=0, threads=1):
    """Standard normals drawn from SeedSequence(seed).spawn(threads), concatenated in worker order."""
    threads = max(1, int(threads))
    children = np.random.SeedSequence(seed).spawn(threads)
    sizes = [n_samples // threads + (1 if k < n_samples % threads else 0) for k in range(threads)]

    def draw(k):
        return np.random.default_rng(children[k]).standard_normal((sizes[k], dim))

    if threads == 1:
        return draw(0)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.vstack(list(pool.map(draw, range(threads))))


@dataclass
class MomentBoundScan:
    c3: float
    c4: float
    cells: list = field(default_factory=list)
    max_ratio: float = 0.0


def _greedy_admissible(sites, count):
    chosen = []
    for k, s in enumerate(sites):
        if all(np.linalg.norm(s - sites[c]) > 1.0 + SITE_TOL for c in chosen):
            chosen.append(k)
        if len(chosen) == count:
            break
    return chosen


def lemma2_constant_scan(C, max_r=LEMMA2_MAX_R, max_n=LEMMA2_MAX_N, n_samples=LEMMA2_SAMPLES,
                         seed=0, threads=1):
    """
    Fit ĉ₃, ĉ₄ with ⟨∏_i(1+|φ_{w_i}|) ∏_j(1+|φ_{x_j}|)³⟩ <= ĉ₃^r ĉ₄^n (r!)^{1/2}.

    The x_j are admissible sites picked left to right; the w_i are placed
    either all on x_1's site ("coincident") or spread over the admissible
    sites ("spread"). Expectations are Monte Carlo estimates; the fit uses
    estimate + 3 standard errors and minimizes log ĉ₃ + log ĉ₄ by linear
    programming.
    """
    if max_r > LEMMA2_MAX_R or max_n > LEMMA2_MAX_N:
        raise CapabilityError(f"scan limited to r <= {LEMMA2_MAX_R}, n <= {LEMMA2_MAX_N}")
    sites = C.grid.sites
    anchors = _greedy_admissible(sites, max(max_n, max_r, 1))
    if len(anchors) < max_n:
        raise CapabilityError("grid too small for the requested number of admissible points")
    phi = np.abs(gaussian_samples(C, int(n_samples), seed, threads))

    cells = []
    for r in range(max_r + 1):
        for n in range(max_n + 1):
            placements = {"coincident": [anchors[0]] * r,
                          "spread": [anchors[i % len(anchors)] for i in range(r)]}
            for name, w_sites in placements.items():
                values = np.ones(len(phi))
                for s in w_sites:
                    values = values * (1.0 + phi[:, s])
                for s in anchors[:n]:
                    values = values * (1.0 + phi[:, s]) ** 3
                mean = float(values.mean())
                err = float(values.std(ddof=1) / math.sqrt(len(values))) if r + n else 0.0
                cells.append({"r": r, "n": n, "placement": name, "lhs": mean, "stderr": err})

    A_ub, b_ub = [], []
    for cell in cells:
        if cell["r"] + cell["n"] == 0:
            continue
        upper = cell["lhs"] + 3.0 * cell["stderr"]
        A_ub.append([-cell["r"], -cell["n"]])
        b_ub.append(-math.log(upper / math.sqrt(math.factorial(cell["r"]))))
    if A_ub:
        fit = optimize.linprog([1.0, 1.0], A_ub=np.array(A_ub), b_ub=np.array(b_ub),
                               bounds=[(0.0, None), (0.0, None)], method="highs")
        if not fit.success:
            raise DomainError(f"constant fit failed: {fit.message}")
        c3, c4 = math.exp(fit.x[0]), math.exp(fit.x[1])
    else:
        c3 = c4 = 1.0

    ratio = 0.0
    for cell in cells:
        bound = c3 ** cell["r"] * c4 ** cell["n"] * math.sqrt(math.factorial(cell["r"]))
        ratio = max(ratio, cell["lhs"] / bound)
    return MomentBoundScan(c3=c3, c4=c4, cells=cells, max_ratio=ratio)


def lemma2_monomial_envelope(C, sites, max_degree=MAX_WICK_DEGREE):
    """ĉ = max over monomials of (|⟨∏φ^{s_j}⟩| / ∏(s_j!)^{1/2})^{1/s}, even s >= 2."""
    sites = [int(s) for s in sites]
    best = 0.0
    for powers in itertools.product(range(max_degree + 1), repeat=len(sites)):
        s = sum(powers)
        if s < 2 or s > max_degree or s % 2:
            continue
        mono = Monomial(dict(zip(sites, powers)))
        value = abs(wick_moment_ibp(C, mono))
        norm = math.prod(math.sqrt(math.factorial(p)) for p in powers)
        best = max(best, (value / norm) ** (1.0 / s))
    return best


def lemma1_stationary_point():
    """ξ* = 1 / (2^{1/3} - 1), where (1 + ξ)³ = 2ξ³."""
    return 1.0 / (2.0 ** (1.0 / 3.0) - 1.0)


def lemma1_constant():
    """sup_{ξ>=0} ((1+ξ)⁴ - 2ξ⁴) = ξ*⁴ (2^{4/3} - 2)."""
    xi = lemma1_stationary_point()
    return xi ** 4 * (2.0 ** (4.0 / 3.0) - 2.0)


def lemma1_search(upper=100.0):
    """Bounded scalar search for the same supremum (independent cross-check)."""
    res = optimize.minimize_scalar(lambda x: -((1.0 + x) ** 4 - 2.0 * x ** 4),
                                   bounds=(0.0, upper), method="bounded",
                                   options={"xatol": 1e-12})
    return float(res.x), float(-res.fun)


# =============================================================================
# GAUSSIAN EXPECTATIONS
# =============================================================================

class Estimate(NamedTuple):
    value: float
    error: float
    method: str


@lru_cache(maxsize=None)
def hermite_rule(order):
    """Probabilists' Gauss-Hermite nodes and weights normalized to N(0, 1)."""
    x, w = hermegauss(order)
    return x, w / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=32)
def _tensor_rule(dim, order):
    x, w = hermite_rule(order)
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    xi = np.array(list(itertools.product(*(x,) * dim)))
    wn = np.prod(np.array(list(itertools.product(*(w,) * dim))), 1)
    return xi, wn


class GaussianIntegrator:
    """
    Expectations E[f(φ)] for φ ~ N(0, C).

    tensor: per-site Gauss-Hermite product rule after the transform φ = Lξ;
    the order is lowered to respect the node budget, never below
    MIN_HERMITE_ORDER. mc: seeded standard normals, the same draws for every
    call with the same dimension (common random numbers).
    """

    def __init__(self, method="tensor", order=HERMITE_ORDER, max_nodes=MAX_TENSOR_NODES,
                 samples=MC_SAMPLES, seed=0, threads=1, min_order=MIN_HERMITE_ORDER):
        if method not in ("tensor", "mc"):
            raise DomainError(f"unknown integration method {method!r}")
        self.method = method
        self.order = int(order)
        self.max_nodes = int(max_nodes)
        self.samples = int(samples)
        self.seed = int(seed)
        self.threads = int(threads)
        self.min_order = int(min_order)
        self._normals = {}

    @property
    def stochastic(self):
        return self.method == "mc"

    def key(self):
        return (self.method, self.order, self.max_nodes, self.samples, self.seed, self.threads,
                self.min_order)

    def with_seed(self, seed):
        return GaussianIntegrator(self.method, self.order, self.max_nodes, self.samples, seed,
                                  self.threads, self.min_order)

    def with_budget(self, max_nodes):
        return GaussianIntegrator(self.method, self.order, max_nodes, self.samples, self.seed,
                                  self.threads, self.min_order)

    def effective_order(self, dim):
        if dim == 0:
            return self.order
        budget = int(math.floor(self.max_nodes ** (1.0 / dim) + 1e-9))
        return min(self.order, max(self.min_order, budget))

    def standard_nodes(self, dim):
        """(ξ, weights) for N(0, I_dim)."""
        if self.method == "tensor":
            return _tensor_rule(dim, self.effective_order(dim))
        if dim not in self._normals:
            xi = standard_normal(dim, self.samples, self.seed, self.threads)
            self._normals[dim] = (xi, np.full(self.samples, 1.0 / self.samples))
        return self._normals[dim]

    def field(self, entries):
        """Field values φ = ξ Lᵀ at the nodes, plus the weights."""
        entries = np.asarray(entries, dtype=float)
        xi, w = self.standard_nodes(entries.shape[0])
        if entries.shape[0] == 0:
            return np.zeros((len(w), 0)), w
        return xi @ sqrt_factor(entries).T, w

    def reduce(self, values, weights):
        value = float(np.dot(weights, values))
        if self.stochastic:
            error = float(np.std(values, ddof=1) / math.sqrt(len(values)))
        else:
            error = 0.0
        return Estimate(value, error, self.method)

    def expectation(self, C, func):
        phi, w = self.field(_matrix(C))
        return self.reduce(np.asarray(func(phi), dtype=float), w)
