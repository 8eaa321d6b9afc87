"""
Ordered trees and their Speer weights.

An ordered tree on {1..n} is a parent map η with η(j) < j. Its weight is
(∏_j d_η(j)!) ∏_l 1/(e_l + 1), where e_l counts the t-monomial degree the
tree contributes to t_l. Summed over all (n-1)! trees the weights give the
Catalan number C_{n-1}; everything here is exact rational arithmetic.
"""

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from phi4ce.errors import CapabilityError, DomainError

# =============================================================================
# CONFIGURATION
# =============================================================================

MIN_TREE_SIZE = 2
MAX_TREE_SIZE = 10          # 9! = 362,880 trees
MAX_SERIES_ORDER = 10
MC_SAMPLES = 1_000_000


@dataclass(frozen=True)
class OrderedTree:
    parent: tuple           # (η(2), ..., η(n))

    def __post_init__(self):
        for j, p in enumerate(self.parent, start=2):
            if not 1 <= p < j:
                raise DomainError(f"invalid parent η({j}) = {p}")

    @property
    def n(self):
        return len(self.parent) + 1

    def eta(self, j):
        return self.parent[j - 2]

    def degrees(self):
        """d_η(j) = |η^{-1}({j})| for j = 1..n."""
        d = [0] * self.n
        for p in self.parent:
            d[p - 1] += 1
        return tuple(d)

    def to_json(self):
        return list(self.parent)


@dataclass(frozen=True)
class SpeerWeight:
    value: Fraction
    t_exponents: tuple


def _check_size(n):
    if not MIN_TREE_SIZE <= n <= MAX_TREE_SIZE:
        raise CapabilityError(f"tree size n={n} outside {MIN_TREE_SIZE}..{MAX_TREE_SIZE}")


def _parent_choices(n):
    return itertools.product(*(range(1, j) for j in range(2, n + 1)))


def enumerate_trees(n):
    """Stream all (n-1)! ordered trees on {1..n}."""
    _check_size(n)
    for parent in _parent_choices(n):
        yield OrderedTree(parent)


def _exponents(parent, n):
    # difference array over l = 1..n-1; j contributes to l in [η(j), j-2]
    diff = [0] * (n + 1)
    for j, p in enumerate(parent, start=2):
        if p <= j - 2:
            diff[p] += 1
            diff[j - 1] -= 1
    out, run = [], 0
    for l in range(1, n):
        run += diff[l]
        out.append(run)
    return tuple(out)


def t_exponents(tree):
    """e_l = |{j : η(j) <= l <= j - 2}| for l = 1..n-1."""
    return _exponents(tree.parent, tree.n)


def _weight_parts(parent, n):
    numerator = 1
    counts = [0] * n
    for p in parent:
        counts[p - 1] += 1
    for c in counts:
        numerator *= math.factorial(c)
    denominator = 1
    for e in _exponents(parent, n):
        denominator *= e + 1
    return numerator, denominator


def speer_weight(tree):
    num, den = _weight_parts(tree.parent, tree.n)
    return SpeerWeight(Fraction(num, den), t_exponents(tree))


def _partial_sum(n, worker, workers):
    """Integer numerators grouped by denominator for one slice of the stream."""
    buckets = {}
    for parent in itertools.islice(_parent_choices(n), worker, None, workers):
        num, den = _weight_parts(parent, n)
        buckets[den] = buckets.get(den, 0) + num
    return buckets


def lemma3_sum(n, threads=1):
    """
    Σ over all ordered trees of the Speer weight, as an exact Fraction.

    With threads > 1 the stream is split round-robin across workers; the
    partial sums are exact so the result does not depend on the split.
    """
    _check_size(n)
    threads = max(1, int(threads))
    if threads == 1:
        parts = [_partial_sum(n, 0, 1)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda k: _partial_sum(n, k, threads), range(threads)))
    merged = {}
    for part in parts:
        for den, num in part.items():
            merged[den] = merged.get(den, 0) + num
    total = Fraction(0)
    for den in sorted(merged):
        total += Fraction(merged[den], den)
    return total


def catalan(n):
    """C_n = binom(2n, n) / (n + 1)."""
    if n < 0:
        raise DomainError("catalan index must be >= 0")
    return math.comb(2 * n, n) // (n + 1)


def series_coefficients(order):
    """
    Coefficients [c_1..c_order] of the solution of ω = x + ω², i.e. of
    ω = x(1 - ω)^{-1}, computed by exact fixed-point iteration on
    truncated power series.
    """
    if not 1 <= order <= MAX_SERIES_ORDER:
        raise CapabilityError(f"series order must be in 1..{MAX_SERIES_ORDER}")
    omega = [Fraction(0)] * (order + 1)
    for _ in range(order):
        square = [Fraction(0)] * (order + 1)
        for i in range(order + 1):
            if omega[i] == 0:
                continue
            for j in range(order + 1 - i):
                square[i + j] += omega[i] * omega[j]
        nxt = square
        nxt[1] += 1
        omega = nxt
    return omega[1:]


def binomial_series_coefficients(order):
    """Coefficients of (1 - sqrt(1 - 4x)) / 2 from the generalized binomial series."""
    coeffs = []
    binom = Fraction(1)          # binom(1/2, k), updated incrementally
    for k in range(1, order + 1):
        binom = binom * (Fraction(1, 2) - (k - 1)) / k
        coeffs.append(-Fraction(1, 2) * binom * (-4) ** k)
    return coeffs


def generating_function_check(order):
    """
    True iff for every n <= order the coefficient of x^n agrees across the
    fixed-point series, the binomial series, the Catalan number C_{n-1} and
    (for n >= 2) the exact tree sum.
    """
    fixed = series_coefficients(order)
    closed = binomial_series_coefficients(order)
    for n in range(1, order + 1):
        expected = Fraction(catalan(n - 1))
        if fixed[n - 1] != expected or closed[n - 1] != expected:
            return False
        if n >= MIN_TREE_SIZE and lemma3_sum(n) != expected:
            return False
    return True


def monte_carlo_speer_weight(tree, n_samples=MC_SAMPLES, seed=0):
    """Numerical ∫_{[0,1]^{n-1}} ∏ t_l^{e_l} dt times ∏ d!; returns (mean, stderr)."""
    e = np.asarray(t_exponents(tree), dtype=float)
    factor = float(np.prod([math.factorial(d) for d in tree.degrees()]))
    rng = np.random.default_rng(seed)
    t = rng.random((int(n_samples), len(e)))
    values = factor * np.prod(t ** e, axis=1)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))
