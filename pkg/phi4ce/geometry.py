"""
Point configurations, unit-ball regions and tree lengths.

1. PointConfiguration: ordered points with pairwise separation > 1
2. BallRegion / shell(): closed unit balls around the points and the shells
   B'_j = B_{x_1..x_j} \\ B_{x_1..x_{j-1}}
3. mst_length(): Kruskal over the complete Euclidean graph (ℓ')
4. steiner_length(): bracket [ℓ'/2, heuristic upper] for the Steiner length ℓ
5. set_tree_length(): both lengths with set-valued terminals
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from networkx.utils import UnionFind

from phi4ce.errors import CapabilityError, DomainError

# =============================================================================
# CONFIGURATION
# =============================================================================

BALL_RADIUS = 1.0
BOUNDARY_TOL = 1e-9          # shared by ball membership and admissibility
MAX_STEINER_TERMINALS = 12
WEISZFELD_TOL = 1e-12
WEISZFELD_MAX_ITER = 20000
DESCENT_SWEEPS = 200
FERMAT_ANGLE = 2.0 * math.pi / 3.0


def _as_points(points, dimension=None):
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros((0, dimension or 1))
    if pts.ndim == 1:
        pts = pts[:, None] if dimension in (None, 1) else pts[None, :]
    if dimension is not None and pts.shape[1] != dimension:
        raise DomainError(f"points have dimension {pts.shape[1]}, expected {dimension}")
    if not np.all(np.isfinite(pts)):
        raise DomainError("point coordinates must be finite")
    return pts


def is_admissible(points):
    """
    True iff all pairwise distances exceed 1 + BOUNDARY_TOL.

    Distances in (1, 1 + BOUNDARY_TOL] are rejected: BallRegion counts such
    points as inside the unit ball, and an admissible point must never sit in
    the ball of another.
    """
    pts = _as_points(points)
    if len(pts) < 2:
        return True
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(pts), 1)
    return bool(np.all(dist[iu] > BALL_RADIUS + BOUNDARY_TOL))


class PointConfiguration:
    """An element of 𝒳_n. Order matters: shells are built left to right."""

    def __init__(self, points, dimension=1, check=True):
        self.points = _as_points(points, dimension)
        self.points.setflags(write=False)
        if check and not is_admissible(self.points):
            raise DomainError("configuration points must be pairwise more than 1 apart")

    @property
    def n(self):
        return len(self.points)

    @property
    def dimension(self):
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, j):
        return self.points[j]

    def prefix(self, k):
        return PointConfiguration(self.points[:k], self.dimension, check=False)

    def extend(self, *points):
        extra = _as_points(np.asarray(points, dtype=float).reshape(-1, self.dimension), self.dimension)
        return PointConfiguration(np.vstack([self.points, extra]), self.dimension)

    def shifted(self, offset):
        return PointConfiguration(self.points + np.asarray(offset, dtype=float), self.dimension, check=False)

    def as_tuple(self):
        return tuple(tuple(float(c) for c in p) for p in self.points)

    def __eq__(self, other):
        return isinstance(other, PointConfiguration) and self.as_tuple() == other.as_tuple()

    def __hash__(self):
        return hash(self.as_tuple())

    def __repr__(self):
        return f"PointConfiguration({self.as_tuple()})"


class BallRegion:
    """B_x = ∪_j {y : |y - x_j| <= 1}."""

    def __init__(self, centers, radius=BALL_RADIUS):
        if radius != BALL_RADIUS:
            raise DomainError("ball radius is fixed at 1")
        self.centers = centers
        self.radius = radius

    def distances(self, y):
        y = _as_points(y, self.centers.dimension)
        if self.centers.n == 0:
            return np.full((len(y), 0), np.inf)
        diff = y[:, None, :] - self.centers.points[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def contains(self, y):
        d = self.distances(y)
        if d.shape[1] == 0:
            return np.zeros(len(d), dtype=bool)
        return np.min(d, axis=1) <= self.radius + BOUNDARY_TOL


@dataclass(frozen=True)
class Shell:
    """Membership predicate for B'_{x_1..x_j}."""
    config: PointConfiguration
    j: int

    def contains(self, y):
        outer = BallRegion(self.config.prefix(self.j)).contains(y)
        inner = BallRegion(self.config.prefix(self.j - 1)).contains(y)
        return outer & ~inner


def shell(config, j):
    if not 1 <= j <= config.n:
        raise DomainError(f"shell index {j} out of range 1..{config.n}")
    return Shell(config, j)


def shell_labels(config, sites):
    """Per site: index k of the shell B'_k containing it, 0 outside B_x."""
    d = BallRegion(config).distances(sites)
    if d.shape[1] == 0:
        return np.zeros(len(d), dtype=int)
    inside = d <= BALL_RADIUS + BOUNDARY_TOL
    return np.where(inside.any(axis=1), np.argmax(inside, axis=1) + 1, 0)


def shell_volumes(config, n_samples=1_000_000, seed=0):
    """Monte Carlo volumes of B'_1..B'_n and of B_x, with standard errors."""
    if config.n == 0:
        return {"shells": [], "shell_errors": [], "total": 0.0, "total_error": 0.0}
    rng = np.random.default_rng(seed)
    lo = config.points.min(axis=0) - BALL_RADIUS
    hi = config.points.max(axis=0) + BALL_RADIUS
    box = float(np.prod(hi - lo))
    samples = lo + (hi - lo) * rng.random((int(n_samples), config.dimension))
    labels = shell_labels(config, samples)

    def estimate(indicator):
        mean = indicator.mean()
        return box * mean, box * math.sqrt(mean * (1.0 - mean) / len(indicator))

    shells = [estimate(labels == k) for k in range(1, config.n + 1)]
    total = estimate(labels > 0)
    return {
        "shells": [v for v, _ in shells],
        "shell_errors": [e for _, e in shells],
        "total": total[0],
        "total_error": total[1],
    }


# =============================================================================
# TREE LENGTHS
# =============================================================================

@dataclass
class TreeLengthResult:
    mst_length: float
    steiner_upper: float
    steiner_lower: float
    steiner_points: list = field(default_factory=list)


def _canonical(points, groups=None):
    """Lexicographic order of points (and their group labels)."""
    order = np.lexsort(points.T[::-1]) if len(points) else np.arange(0)
    pts = points[order]
    if groups is None:
        return pts, None
    return pts, np.asarray(groups)[order]


def _kruskal(points, groups=None):
    """
    Minimum spanning tree length and edge list.

    Edges are processed in (weight, i, j) order so ties resolve the same way
    on every run. Points sharing a group label are joined at zero cost.
    """
    n = len(points)
    if n <= 1:
        return 0.0, []
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    if groups is not None:
        same = np.asarray(groups)[:, None] == np.asarray(groups)[None, :]
        dist = np.where(same, 0.0, dist)
    i, j = np.triu_indices(n, 1)
    w = dist[i, j]
    order = np.lexsort((j, i, w))

    subtrees = UnionFind()
    total = 0.0
    edges = []
    for e in order:
        u, v = int(i[e]), int(j[e])
        if subtrees[u] != subtrees[v]:
            subtrees.union(u, v)
            total += float(w[e])
            edges.append((u, v))
            if len(edges) == n - 1:
                break
    return total, edges


def mst_length(points):
    """Length ℓ' of a Euclidean minimum spanning tree; 0 for one point."""
    pts = _as_points(points)
    if len(pts) == 0:
        raise DomainError("mst_length needs at least one point")
    return _kruskal(_canonical(pts)[0])[0]


def _weiszfeld(anchors, start, tol=WEISZFELD_TOL, max_iter=WEISZFELD_MAX_ITER):
    """Geometric median of `anchors` by Weiszfeld iteration."""
    y = np.array(start, dtype=float)
    for _ in range(max_iter):
        d = np.maximum(np.linalg.norm(anchors - y, axis=1), 1e-15)
        w = 1.0 / d
        y_new = (anchors * w[:, None]).sum(axis=0) / w.sum()
        if np.linalg.norm(y_new - y) < tol:
            return y_new
        y = y_new
    return y


def _angle(at, a, b):
    u, v = a - at, b - at
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return math.pi
    c = float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
    return math.acos(c)


def fermat_point(a, b, c):
    """Fermat point of a triangle, or None when an angle is >= 120 degrees."""
    tri = np.array([a, b, c], dtype=float)
    for k in range(3):
        others = [tri[m] for m in range(3) if m != k]
        if _angle(tri[k], *others) >= FERMAT_ANGLE - 1e-12:
            return None
    return _weiszfeld(tri, tri.mean(axis=0))


def _tree_cost(points, edges):
    return sum(float(np.linalg.norm(points[u] - points[v])) for u, v in edges)


def _four_point_steiner(pts):
    """Exact Steiner length for 4 terminals: best of the three full topologies."""
    best = math.inf
    best_points = []
    for (a, b), (c, d) in (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))):
        s1 = pts[[a, b]].mean(axis=0)
        s2 = pts[[c, d]].mean(axis=0)
        prev = math.inf
        for _ in range(DESCENT_SWEEPS * 10):
            s1 = _weiszfeld(np.vstack([pts[a], pts[b], s2]), s1)
            s2 = _weiszfeld(np.vstack([pts[c], pts[d], s1]), s2)
            cost = (np.linalg.norm(pts[a] - s1) + np.linalg.norm(pts[b] - s1)
                    + np.linalg.norm(pts[c] - s2) + np.linalg.norm(pts[d] - s2)
                    + np.linalg.norm(s1 - s2))
            if prev - cost < 1e-13:
                break
            prev = cost
        if cost < best:
            best, best_points = float(cost), [s1, s2]
    # single Steiner point joining all four (the two Steiner points merged)
    s = _weiszfeld(pts, pts.mean(axis=0))
    cross = float(np.sum(np.linalg.norm(pts - s, axis=1)))
    if cross < best:
        best, best_points = cross, [s]
    return best, best_points


def _iterated_steiner(terminals, groups, tol, rng=None):
    """
    Iterated 1-Steiner heuristic.

    Candidates are Fermat points of adjacent MST edge pairs; the best
    improving candidate is inserted, useless Steiner points (degree <= 2)
    are dropped, and each Steiner point is moved to the geometric median of
    its tree neighbours. Every step keeps a valid tree, so the length never
    increases.
    """
    n_term = len(terminals)
    if groups is None:
        groups = np.arange(n_term)
    groups = np.asarray(groups)
    steiner = []

    def assemble(extra):
        pts = np.vstack([terminals] + [p[None, :] for p in extra]) if extra else terminals
        g = np.concatenate([groups, groups.max() + 1 + np.arange(len(extra))]) if extra else groups
        return pts, g

    pts, g = assemble(steiner)
    length, edges = _kruskal(pts, g)
    while len(steiner) < max(n_term - 2, 0):
        adjacency = {v: [] for v in range(len(pts))}
        for u, v in edges:
            adjacency[u].append(v)
            adjacency[v].append(u)
        candidates = []
        for v in sorted(adjacency):
            for a, b in itertools.combinations(sorted(adjacency[v]), 2):
                p = fermat_point(pts[v], pts[a], pts[b])
                if p is not None:
                    candidates.append(p)
        if rng is not None and candidates:
            scale = 1e-3 * (1.0 + length)
            candidates = [c + rng.normal(0.0, scale, size=c.shape) for c in candidates]

        best_gain, best_point = tol, None
        for p in candidates:
            trial = _kruskal(*assemble(steiner + [p]))[0]
            if length - trial > best_gain:
                best_gain, best_point = length - trial, p
        if best_point is None:
            break
        steiner = steiner + [best_point]
        steiner = _prune(terminals, groups, steiner, assemble)
        steiner = _descend(steiner, assemble, tol)
        pts, g = assemble(steiner)
        length, edges = _kruskal(pts, g)
    return length, steiner


def _prune(terminals, groups, steiner, assemble):
    """Drop Steiner points of degree <= 2 in the current MST."""
    while steiner:
        pts, g = assemble(steiner)
        _, edges = _kruskal(pts, g)
        degree = np.zeros(len(pts), dtype=int)
        for u, v in edges:
            degree[u] += 1
            degree[v] += 1
        weak = [k for k in range(len(steiner)) if degree[len(terminals) + k] <= 2]
        if not weak:
            break
        steiner = [p for k, p in enumerate(steiner) if k != weak[0]]
    return steiner


def _descend(steiner, assemble, tol):
    """Move Steiner points to the geometric median of their MST neighbours."""
    pts, g = assemble(steiner)
    length, edges = _kruskal(pts, g)
    offset = len(pts) - len(steiner)
    for _ in range(DESCENT_SWEEPS):
        moved = list(steiner)
        for k in range(len(moved)):
            v = offset + k
            nbrs = [b if a == v else a for a, b in edges if v in (a, b)]
            if nbrs:
                moved[k] = _weiszfeld(pts[nbrs], moved[k])
        trial, trial_edges = _kruskal(*assemble(moved))
        if length - trial <= tol:
            break
        steiner, length, edges = moved, trial, trial_edges
        pts, g = assemble(steiner)
    return steiner


def steiner_length(points, tol=1e-10, seed=None, restarts=0):
    """
    Bracket for the Steiner length ℓ.

    The lower side is ℓ'/2, from ℓ' <= 2ℓ. The upper side is exact for
    n <= 4 (Fermat point for 3, topology enumeration for 4) and an iterated
    1-Steiner heuristic up to 12 terminals; `restarts` extra runs with
    jittered candidates are drawn from `seed`. On a line no Steiner point
    can help, so d=1 returns ℓ' directly.
    """
    pts = _as_points(points)
    n = len(pts)
    if n == 0:
        raise DomainError("steiner_length needs at least one point")
    if n > MAX_STEINER_TERMINALS:
        raise CapabilityError(f"steiner_length supports at most {MAX_STEINER_TERMINALS} points")
    pts = _canonical(pts)[0]
    mst = _kruskal(pts)[0]
    result = TreeLengthResult(mst, mst, 0.5 * mst, [])
    if n <= 2 or pts.shape[1] == 1:
        return result

    if n == 3:
        p = fermat_point(*pts)
        if p is not None:
            cost = float(np.sum(np.linalg.norm(pts - p, axis=1)))
            if cost < mst:
                result.steiner_upper, result.steiner_points = cost, [p.tolist()]
        return result

    if n == 4:
        cost, extra = _four_point_steiner(pts)
    else:
        cost, extra = _iterated_steiner(pts, None, tol)
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            trial, trial_extra = _iterated_steiner(pts, None, tol, rng)
            if trial < cost:
                cost, extra = trial, trial_extra
    if cost < mst:
        result.steiner_upper = float(cost)
        result.steiner_points = [np.asarray(p).tolist() for p in extra]
    return result


def _flatten_sets(sets):
    if len(sets) == 0:
        raise DomainError("set_tree_length needs at least one set")
    arrays, labels = [], []
    for k, s in enumerate(sets):
        pts = _as_points(s)
        if len(pts) == 0:
            raise DomainError(f"set {k} is empty")
        arrays.append(pts)
        labels.extend([k] * len(pts))
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise DomainError("all sets must live in the same dimension")
    return np.vstack(arrays), np.asarray(labels)


def set_tree_bracket(sets, tol=1e-10):
    """Tree lengths with set-valued terminals (edges inside a set are free)."""
    pts, labels = _flatten_sets(sets)
    pts, labels = _canonical(pts, labels)
    mst = _kruskal(pts, labels)[0]
    result = TreeLengthResult(mst, mst, 0.5 * mst, [])
    if len(sets) <= 2 or pts.shape[1] == 1 or len(pts) > MAX_STEINER_TERMINALS:
        return result
    cost, extra = _iterated_steiner(pts, labels, tol)
    if cost < mst:
        result.steiner_upper = float(cost)
        result.steiner_points = [np.asarray(p).tolist() for p in extra]
    return result


def set_tree_length(sets, steiner=False):
    """ℓ' (steiner=False) or the ℓ upper bound over point sets."""
    bracket = set_tree_bracket(sets)
    return bracket.steiner_upper if steiner else bracket.mst_length
