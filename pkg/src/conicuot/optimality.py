"""Optimality certificates on finite supports.

A support set Gamma is a finite list of atom pairs (y1, y2) of cone points.
This module checks H-cyclical monotonicity of Gamma, builds the bipartite
walk graph (Gamma-arcs from side 1 to side 2, finite-H arcs back), tests
connectedness, and reconstructs potentials from shortest-walk costs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .cone import ConePoint, HomogeneousCoupling, Space, VERTEX
from .costs import CostFunction, rowwise_distance

INF = math.inf
MAX_CYCLE = 6
_BLOCK = 200_000
_RATIO_PROBE = np.logspace(-8, 8, 161)


class NegativeCycle(ArithmeticError):
    """A cycle of negative walk cost was found where none may exist."""

    def __init__(self, message: str, cycle: Sequence[int]):
        super().__init__(message)
        self.cycle = list(cycle)


# --------------------------------------------------------------------------
# support sets

@dataclass(frozen=True)
class SupportSet:
    """Atoms (y1, y2); vertex positions are NaN rows with zero radius.

    `radial_cone` declares Gamma closed under joint scaling of each atom,
    `radial_convex` additionally closed under convex combinations of radii
    on each position pair.  Both only affect `contains` and the graph arcs.
    """

    x1: np.ndarray
    r1: np.ndarray
    x2: np.ndarray
    r2: np.ndarray
    radial_cone: bool = False
    radial_convex: bool = False

    def __post_init__(self):
        r1 = np.asarray(self.r1, float).reshape(-1)
        r2 = np.asarray(self.r2, float).reshape(-1)
        k = len(r1)
        x1 = np.asarray(self.x1, float).reshape(k, -1).copy()
        x2 = np.asarray(self.x2, float).reshape(k, -1).copy()
        if len(r2) != k or len(x2) != k:
            raise ValueError("support arrays have inconsistent lengths")
        if np.any(r1 < 0) or np.any(r2 < 0) or not np.all(np.isfinite(np.r_[r1, r2])):
            raise ValueError("radii must be finite and non-negative")
        x1[r1 == 0] = np.nan
        x2[r2 == 0] = np.nan
        for name, val in (("x1", x1), ("r1", r1), ("x2", x2), ("r2", r2)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        if self.radial_convex and not self.radial_cone:
            object.__setattr__(self, "radial_cone", True)

    @classmethod
    def from_coupling(cls, alpha: HomogeneousCoupling, radial_cone: bool = False,
                      radial_convex: bool = False) -> "SupportSet":
        return cls(alpha.x1, alpha.r1, alpha.x2, alpha.r2, radial_cone, radial_convex)

    @classmethod
    def from_points(cls, atoms: Sequence[tuple[ConePoint, ConePoint]], dims=(1, 1), **flags) -> "SupportSet":
        alpha = HomogeneousCoupling.from_points([(a, b, 1.0) for a, b in atoms], 1.0, dims)
        return cls.from_coupling(alpha, **flags)

    def __len__(self) -> int:
        return len(self.r1)

    @property
    def dims(self) -> tuple[int, int]:
        return self.x1.shape[1], self.x2.shape[1]

    def atoms(self):
        for a in range(len(self)):
            yield (ConePoint(None if self.r1[a] == 0 else self.x1[a], self.r1[a]),
                   ConePoint(None if self.r2[a] == 0 else self.x2[a], self.r2[a]))

    def contains(self, y1: ConePoint, y2: ConePoint, tol: float = 1e-12) -> bool:
        for z1, z2 in self.atoms():
            if not (_same_position(y1, z1, tol) and _same_position(y2, z2, tol)):
                continue
            if not self.radial_cone:
                if abs(y1.r - z1.r) <= tol * (1 + z1.r) and abs(y2.r - z2.r) <= tol * (1 + z2.r):
                    return True
                continue
            # same ray: (y1.r, y2.r) parallel to (z1.r, z2.r)
            if abs(y1.r * z2.r - y2.r * z1.r) <= tol * (1 + y1.r * z2.r + y2.r * z1.r):
                return True
        if self.radial_convex and not (y1.is_vertex and y2.is_vertex):
            return self._in_convex_section(y1, y2, tol)
        return False

    def _in_convex_section(self, y1, y2, tol) -> bool:
        # the section over a position pair is the convex cone spanned by its rays
        angles = []
        for z1, z2 in self.atoms():
            if _same_position(y1, z1, tol) and _same_position(y2, z2, tol):
                angles.append(math.atan2(z2.r, z1.r))
        if not angles:
            return False
        t = math.atan2(y2.r, y1.r)
        return min(angles) - tol <= t <= max(angles) + tol


def _same_position(y: ConePoint, z: ConePoint, tol: float) -> bool:
    if y.is_vertex or z.is_vertex:
        return y.is_vertex and z.is_vertex
    return bool(np.all(np.abs(np.asarray(y.x) - np.asarray(z.x)) <= tol * (1 + np.abs(np.asarray(z.x)))))


def _cross_matrix(G: SupportSet, cost: CostFunction, space: Space) -> np.ndarray:
    """W[a, b] = H(y1 of atom a, y2 of atom b)."""
    k = len(G)
    ia, ib = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    vals = cost.eval_arrays(G.x1[ia.ravel()], G.r1[ia.ravel()], G.x2[ib.ravel()], G.r2[ib.ravel()], space)
    return np.asarray(vals, float).reshape(k, k)


def _space_for(G: SupportSet, space: Optional[Space]) -> Space:
    return space or Space(G.dims[0])


# --------------------------------------------------------------------------
# cyclical monotonicity

@dataclass(frozen=True)
class MonotonicityReport:
    monotone: bool
    worst_margin: float
    worst_cycle: tuple
    cycles_checked: int
    max_cycle: int
    tol: float

    def to_json(self) -> dict:
        return {"monotone": self.monotone, "worst_margin": self.worst_margin,
                "worst_cycle": list(self.worst_cycle), "cycles_checked": self.cycles_checked,
                "max_cycle": self.max_cycle, "tol": self.tol}


def _cycles_from(start: int, R: np.ndarray, max_cycle: int):
    """Worst closing margin over simple cycles whose smallest atom is `start`."""
    k = R.shape[0]
    best, best_cycle, count = INF, (), 0
    stack = [(np.array([[start]]), np.zeros(1))]
    while stack:
        paths, costs = stack.pop()
        L = paths.shape[1]
        if L >= 2:
            close = costs + R[paths[:, -1], start]
            count += len(close)
            j = int(np.argmin(close))
            if close[j] < best:
                best, best_cycle = float(close[j]), tuple(int(v) for v in paths[j])
        if L == max_cycle:
            continue
        cand = np.arange(start + 1, k)
        if len(cand) == 0:
            continue
        ext = np.repeat(paths, len(cand), axis=0)
        nxt = np.tile(cand, len(paths))
        keep = ~np.any(ext == nxt[:, None], axis=1)
        ext, nxt = ext[keep], nxt[keep]
        new_cost = np.repeat(costs, len(cand))[keep] + R[ext[:, -1], nxt]
        new_paths = np.hstack([ext, nxt[:, None]])
        for lo in range(0, len(new_paths), _BLOCK):
            stack.append((new_paths[lo:lo + _BLOCK], new_cost[lo:lo + _BLOCK]))
    return best, best_cycle, count


def check_cyclical_monotonicity(G: SupportSet, cost: CostFunction, max_cycle: int = 4,
                                tol: float = 1e-8, space: Optional[Space] = None,
                                threads: int = 1) -> MonotonicityReport:
    """Worst value of sum H(y1^i, y2^sigma(i)) - sum H(y1^i, y2^i) over cycles.

    Every permutation splits into cycles, so enumerating simple cycles of
    length <= max_cycle decides monotonicity for all families of that size.
    Gamma passes when the worst margin is >= -tol (1 + max |H| on Gamma).
    """
    if not 1 <= max_cycle <= MAX_CYCLE:
        raise ValueError(f"max_cycle must be between 1 and {MAX_CYCLE}")
    k = len(G)
    if k < 2 or max_cycle < 2:
        return MonotonicityReport(True, 0.0, (), 0, max_cycle, tol)
    W = _cross_matrix(G, cost, _space_for(G, space))
    diag = np.diag(W).copy()
    if not np.all(np.isfinite(diag)):
        raise ValueError("support set leaves the domain of the cost")
    with np.errstate(invalid="ignore"):
        R = W - diag[:, None]
    starts = range(k - 1)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda s: _cycles_from(s, R, max_cycle), starts))
    else:
        results = [_cycles_from(s, R, max_cycle) for s in starts]
    worst, cycle, count = INF, (), 0
    for val, cyc, c in results:
        count += c
        if val < worst:
            worst, cycle = val, cyc
    scale = 1.0 + float(np.max(np.abs(diag)))
    return MonotonicityReport(bool(worst >= -tol * scale), float(worst), cycle, count, max_cycle, tol)


# --------------------------------------------------------------------------
# walk graph

@dataclass(frozen=True)
class WalkGraph:
    """Bipartite directed graph on the deduplicated projections of Gamma.

    Vertices 0..n1-1 are side-1 points, n1..n1+n2-1 side-2 points.
    gamma_arcs are (side-1 index, side-2 index) pairs of Gamma; h_arcs are
    (side-2 index, side-1 index) pairs with finite H.
    """

    v1: tuple
    v2: tuple
    gamma_arcs: tuple
    h_arcs: tuple
    atom_arcs: tuple  # gamma arc of every atom, in atom order

    @property
    def size(self) -> int:
        return len(self.v1) + len(self.v2)

    def adjacency(self) -> csr_matrix:
        n1 = len(self.v1)
        rows = [i for i, _ in self.gamma_arcs] + [n1 + j for j, _ in self.h_arcs]
        cols = [n1 + j for _, j in self.gamma_arcs] + [i for _, i in self.h_arcs]
        return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.size, self.size))

    def vertex(self, idx: int) -> tuple[int, ConePoint]:
        n1 = len(self.v1)
        return (1, self.v1[idx]) if idx < n1 else (2, self.v2[idx - n1])


def _dedup(x: np.ndarray, r: np.ndarray):
    """Unique cone points (radii compared after normalising by the largest)."""
    scale = float(np.max(r)) if len(r) and np.max(r) > 0 else 1.0
    keys, points, index = {}, [], np.empty(len(r), int)
    for a in range(len(r)):
        if r[a] == 0:
            key = ("o",)
        else:
            key = (tuple(np.round(x[a] / 1e-12).astype(np.int64).tolist()), round(r[a] / scale / 1e-12))
        if key not in keys:
            keys[key] = len(points)
            points.append(VERTEX if r[a] == 0 else ConePoint(x[a], r[a]))
        index[a] = keys[key]
    return points, index


def _point_arrays(points: Sequence[ConePoint], dim: int):
    x = np.full((len(points), dim), np.nan)
    r = np.zeros(len(points))
    for a, y in enumerate(points):
        if not y.is_vertex:
            x[a] = y.x
            r[a] = y.r
    return x, r


def _hinf_finite(cost: CostFunction, d: np.ndarray) -> np.ndarray:
    """Whether some scaling of the pair has finite cost (position distances d)."""
    d = np.asarray(d, float)
    probe = list(_RATIO_PROBE)
    if cost.domain is not None:
        q1, q2 = cost.domain
        lo = max(q1, 1e-12)
        hi = 1.0 / q2 if q2 > 0 else 1e12
        probe.append(math.sqrt(lo * hi))
    g = np.asarray(probe)
    vals = cost.radial(np.ones_like(g)[:, None], g[:, None], d.ravel()[None, :])
    return np.any(np.isfinite(vals), axis=0).reshape(d.shape)


def build_graph(G: SupportSet, cost: CostFunction, space: Optional[Space] = None) -> WalkGraph:
    """The walk graph of Gamma; raises when an atom lies outside D(H)."""
    space = _space_for(G, space)
    if len(G):
        vals = cost.eval_arrays(G.x1, G.r1, G.x2, G.r2, space)
        bad = np.flatnonzero(~np.isfinite(vals))
        if len(bad):
            raise ValueError(f"atom {int(bad[0])} lies outside the domain of the cost")
    v1, idx1 = _dedup(G.x1, G.r1)
    v2, idx2 = _dedup(G.x2, G.r2)
    atom_arcs = tuple((int(i), int(j)) for i, j in zip(idx1, idx2))
    gamma_arcs = tuple(sorted(set(atom_arcs)))
    h_arcs = []
    if v1 and v2:
        X1, R1 = _point_arrays(v1, G.dims[0])
        X2, R2 = _point_arrays(v2, G.dims[1])
        n1, n2 = len(v1), len(v2)
        ii, jj = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        if G.radial_cone:
            d = rowwise_distance(X1[ii], X2[jj], space)
            vert = (R1[ii] == 0) | (R2[jj] == 0)
            ok = _hinf_finite(cost, d) | vert
        else:
            ok = np.isfinite(cost.eval_arrays(X1[ii], R1[ii], X2[jj], R2[jj], space))
        h_arcs = [(int(j), int(i)) for i, j in zip(ii[ok], jj[ok])]
    return WalkGraph(tuple(v1), tuple(v2), gamma_arcs, tuple(sorted(h_arcs)), atom_arcs)


# --------------------------------------------------------------------------
# walks

@dataclass(frozen=True)
class Walk:
    """Alternating sequence of (side, cone point) pairs."""

    points: tuple

    @classmethod
    def from_graph(cls, graph: WalkGraph, indices: Sequence[int]) -> "Walk":
        return cls(tuple(graph.vertex(int(i)) for i in indices))

    def __len__(self) -> int:
        return len(self.points)

    def __add__(self, other: "Walk") -> "Walk":
        if not self.points or not other.points:
            return Walk(self.points + other.points)
        if self.points[-1][0] != other.points[0][0] or \
                not _same_point(self.points[-1][1], other.points[0][1]):
            raise ValueError("walks do not share the junction point")
        return Walk(self.points + other.points[1:])

    def without_vertex_arcs(self) -> "Walk":
        """Remove internal arcs (o1, o2) from the walk."""
        pts = list(self.points)
        k = 1
        while k < len(pts) - 2:
            (s1, y1), (s2, y2) = pts[k], pts[k + 1]
            if s1 == 1 and s2 == 2 and y1.is_vertex and y2.is_vertex:
                del pts[k:k + 2]
            else:
                k += 1
        return Walk(tuple(pts))


def _same_point(y: ConePoint, z: ConePoint, tol: float = 1e-12) -> bool:
    return _same_position(y, z, tol) and abs(y.r - z.r) <= tol * (1 + abs(z.r))


def walk_cost(P: Walk, cost: CostFunction, G: Optional[SupportSet] = None,
              space: Optional[Space] = None) -> float:
    """Sum of oriented costs: -H on side-1 -> side-2 arcs, +H on side-2 -> side-1 arcs.

    When Gamma is given, side-1 -> side-2 arcs must be atoms of Gamma.  The
    value is +inf exactly when some side-2 -> side-1 arc has infinite cost.
    """
    total = 0.0
    for h in range(1, len(P.points)):
        (s0, y0), (s1, y1) = P.points[h - 1], P.points[h]
        if s0 == s1:
            raise ValueError(f"consecutive walk points {h - 1}, {h} lie on the same side")
        if s0 == 1:
            if G is not None and not G.contains(y0, y1):
                raise ValueError(f"arc {h - 1} -> {h} is not an atom of the support set")
            v = cost.eval(y0, y1, space)
            if not math.isfinite(v):
                raise ValueError(f"arc {h - 1} -> {h} leaves the domain of the cost")
            total -= v
        else:
            total += cost.eval(y1, y0, space)
    return total


# --------------------------------------------------------------------------
# connectedness

@dataclass(frozen=True)
class ConnectednessReport:
    connected: bool
    components: int
    conditions: dict
    witness: tuple = ()

    def to_json(self) -> dict:
        return {
            "connected": self.connected,
            "components": self.components,
            "conditions": dict(self.conditions),
            "witness": [[{"side": s, "x": None if y.is_vertex else list(map(float, y.x)), "r": float(y.r)}
                         for s, y in w.points] for w in self.witness],
        }


def _radial_interior(cost: CostFunction, G: SupportSet, space: Space) -> np.ndarray:
    k = len(G)
    inside = (G.r1 > 0) & (G.r2 > 0)
    if not np.any(inside):
        return inside
    d = rowwise_distance(G.x1, G.x2, space)
    h = 1e-6
    for f1, f2 in ((1 + h, 1 + h), (1 + h, 1 - h), (1 - h, 1 + h), (1 - h, 1 - h)):
        v = cost.radial(G.r1 * f1, G.r2 * f2, d)
        inside &= np.isfinite(np.asarray(v, float) * np.ones(k))
    return inside


def check_connectedness(G: SupportSet, cost: CostFunction, space: Optional[Space] = None) -> ConnectednessReport:
    """Strong connectivity of the side-1 points of the walk graph.

    Also evaluates three sufficient conditions: (1) Gamma connected through
    pairs of finite scaled cost with every non-vertex atom in the radial
    interior of D(H); (2) finite scaled cost on all projection pairs and an
    atom in the radial interior; (3) finite scaled cost on all projection
    pairs and both a pure-destruction and a pure-creation atom.
    """
    space = _space_for(G, space)
    graph = build_graph(G, cost, space)
    n1, n2 = len(graph.v1), len(graph.v2)
    if n1 == 0:
        return ConnectednessReport(True, 0, {"hinf_connected_interior": True, "hinf_finite_interior_atom": False,
                                             "hinf_finite_vertex_pairs": False}, ())
    ncomp, labels = connected_components(graph.adjacency(), directed=True, connection="strong")
    side1 = labels[:n1]
    connected = bool(np.all(side1 == side1[0]))

    # scaled-cost (H_inf) graph and its connectivity
    cone = SupportSet(G.x1, G.r1, G.x2, G.r2, radial_cone=True)
    inf_graph = build_graph(cone, cost, space)
    _, inf_labels = connected_components(inf_graph.adjacency(), directed=True, connection="strong")
    inf_side1 = inf_labels[:len(inf_graph.v1)]
    hinf_connected = bool(np.all(inf_side1 == inf_side1[0]))
    hinf_all = len(inf_graph.h_arcs) == len(inf_graph.v1) * len(inf_graph.v2)
    interior = _radial_interior(cost, G, space)
    vertex_atoms = (G.r1 == 0) | (G.r2 == 0)
    conditions = {
        "hinf_connected_interior": bool(hinf_connected and np.all(interior | vertex_atoms)),
        "hinf_finite_interior_atom": bool(hinf_all and np.any(interior)),
        "hinf_finite_vertex_pairs": bool(hinf_all and np.any((G.r1 > 0) & (G.r2 == 0))
                                         and np.any((G.r1 == 0) & (G.r2 > 0))),
    }
    witness = ()
    if connected:
        _, pred = shortest_path(graph.adjacency(), unweighted=True, directed=True,
                                return_predecessors=True, indices=[0])
        _, pred_back = shortest_path(graph.adjacency().T.tocsr(), unweighted=True, directed=True,
                                     return_predecessors=True, indices=[0])
        walks = []
        for target in range(1, n1):
            fwd = _trace(pred[0], 0, target)
            back = _trace(pred_back[0], 0, target)[::-1]
            walks.append(Walk.from_graph(graph, fwd))
            walks.append(Walk.from_graph(graph, back))
        witness = tuple(walks)
    return ConnectednessReport(connected, int(len(set(side1.tolist()))), conditions, witness)


def _trace(pred: np.ndarray, source: int, target: int) -> list:
    path = [target]
    while path[-1] != source:
        path.append(int(pred[path[-1]]))
    return path[::-1]


# --------------------------------------------------------------------------
# potentials from walk costs

@dataclass(frozen=True)
class WalkPotential:
    """Unit-radius potentials zeta1 on side-1 positions and zeta2 on side-2 positions.

    Phi([x, r]) = zeta1(x) r; positions are listed in first-occurrence order
    of the non-vertex atoms of Gamma.
    """

    positions1: np.ndarray
    zeta1: np.ndarray
    positions2: np.ndarray
    zeta2: np.ndarray
    base_atom: int
    anchor: float
    rounds: int

    def phi(self, y1: ConePoint) -> float:
        if y1.is_vertex:
            return 0.0
        i = _lookup(self.positions1, y1.x)
        return float(self.zeta1[i] * y1.r)

    def on_instance(self, inst):
        """(phi1, phi2) on the supports of an instance (+inf off Gamma)."""
        from .dual import PotentialPair
        phi1 = np.full(inst.shape[0], INF)
        phi2 = np.full(inst.shape[1], INF)
        i1 = inst.mu1.index_of(self.positions1) if len(self.positions1) else np.zeros(0, int)
        i2 = inst.mu2.index_of(self.positions2) if len(self.positions2) else np.zeros(0, int)
        phi1[i1[i1 >= 0]] = self.zeta1[i1 >= 0]
        phi2[i2[i2 >= 0]] = self.zeta2[i2 >= 0]
        return PotentialPair(phi1, phi2)


def _lookup(positions: np.ndarray, x) -> int:
    hit = np.flatnonzero(np.all(np.abs(positions - np.asarray(x, float)) <= 1e-12 * (1 + np.abs(positions)), axis=1))
    if len(hit) == 0:
        raise KeyError("position is not a projection of the support set")
    return int(hit[0])


def _unique_rows(x: np.ndarray):
    keys, rows, index = {}, [], np.empty(len(x), int)
    for a, row in enumerate(x):
        key = tuple(np.round(row / 1e-12).astype(np.int64).tolist())
        if key not in keys:
            keys[key] = len(rows)
            rows.append(row)
        index[a] = keys[key]
    dim = x.shape[1] if x.ndim == 2 else 1
    return np.array(rows, float).reshape(-1, dim), index


def walk_potential(G: SupportSet, cost: CostFunction, base_atom: Optional[int] = None,
                   space: Optional[Space] = None, tol: float = 1e-9) -> WalkPotential:
    """Potentials induced by infimal walk costs from a base atom.

    The base ray is anchored at the radial subgradient of H at the base atom
    (at the destruction slope when its partner is the vertex).  Relaxation
    along walks then uses the exact infimum over the radial scale:
    zeta1(x') <= inf_s [zeta1(x_a) r1_a - H(a) + H([x', s], y2_a)] / s for
    every atom a.  Walks that loop through one atom at geometrically
    changing scales drive its ray down to the radial subgradient at the
    atom; that limit is applied directly once the ray is reachable.  Rays left at +inf are unreachable (Gamma not connected);
    a strict decrease at the base ray, or no fixed point after |Gamma_1|
    rounds, reveals a negative cycle.
    """
    space = _space_for(G, space)
    k = len(G)
    if k == 0:
        raise ValueError("empty support set")
    live1 = G.r1 > 0
    live2 = G.r2 > 0
    P1, idx1 = _unique_rows(G.x1[live1]) if np.any(live1) else (np.zeros((0, G.dims[0])), np.zeros(0, int))
    P2, idx2 = _unique_rows(G.x2[live2]) if np.any(live2) else (np.zeros((0, G.dims[1])), np.zeros(0, int))
    ray1 = -np.ones(k, int)
    ray1[live1] = idx1
    ray2 = -np.ones(k, int)
    ray2[live2] = idx2
    Hval = cost.eval_arrays(G.x1, G.r1, G.x2, G.r2, space)
    if not np.all(np.isfinite(Hval)):
        raise ValueError("support set leaves the domain of the cost")

    if base_atom is None:
        interior = np.flatnonzero(_radial_interior(cost, G, space))
        destroy = np.flatnonzero(live1 & ~live2)
        if len(interior):
            base_atom = int(interior[0])
        elif len(destroy):
            base_atom = int(destroy[0])
        else:
            raise ValueError("no base atom: need an interior atom or a pure-destruction atom")
    if not live1[base_atom]:
        raise ValueError("the base atom must have a positive first radius")
    if live2[base_atom]:
        d = rowwise_distance(G.x1[[base_atom]], G.x2[[base_atom]], space)
        g1, _ = cost.radial_grad(G.r1[base_atom], G.r2[base_atom], d[0])
        anchor = float(g1)
    else:
        anchor = float(cost.destruction(0.0))
    if not math.isfinite(anchor):
        raise ValueError("base atom has no finite radial subgradient")

    n1 = len(P1)
    zeta = np.full(n1, INF)
    base = ray1[base_atom]
    zeta[base] = anchor
    # distances from every side-1 position to the partner of every atom
    if n1:
        D = np.zeros((n1, k))
        for a in range(k):
            if live2[a]:
                D[:, a] = rowwise_distance(P1, np.repeat(G.x2[[a]], n1, axis=0), space)
    loop_limit = np.full(n1, INF)
    inner = live1 & live2
    if np.any(inner):
        d_in = rowwise_distance(G.x1[inner], G.x2[inner], space)
        g1, _ = cost.radial_grad(G.r1[inner], G.r2[inner], d_in)
        np.minimum.at(loop_limit, ray1[inner], np.asarray(g1, float))
    rounds = 0
    for rounds in range(1, n1 + 2):
        # potential of each atom's partner (unit radius) from equality on Gamma
        psi = np.full(k, INF)
        with np.errstate(invalid="ignore"):
            src = np.where(live1, zeta[np.maximum(ray1, 0)] * G.r1, 0.0)
        ok = live2 & np.isfinite(src)
        psi[ok] = (Hval[ok] - src[ok]) / G.r2[ok]
        cand = np.full(n1, INF)
        for a in np.flatnonzero(ok):
            b = np.full(n1, psi[a])
            # values within round-off of the creation slope sit on it
            slope = np.asarray(cost.recession(D[:, a]), float) * np.ones(n1)
            near = (b > slope) & (b <= slope + 1e-12 * (1 + np.abs(slope)))
            cand = np.minimum(cand, cost.conj(np.where(near, slope, b), D[:, a], side=1))
        new = np.minimum(zeta, cand)
        # repeating the loop (y1, y2, y1') inside one atom's ray converges to
        # the radial subgradient there; take that limit on reachable rays
        new = np.where(np.isfinite(new), np.minimum(new, loop_limit), new)
        if new[base] < anchor - tol * (1 + abs(anchor)):
            raise NegativeCycle(f"walk relaxation lowers the base ray by {anchor - new[base]:.3e}",
                                [base_atom])
        new[base] = anchor
        changed = np.any(new < zeta - tol * (1 + np.abs(np.where(np.isfinite(zeta), zeta, 0.0))))
        zeta = new
        if not changed:
            break
    else:
        raise NegativeCycle("walk relaxation did not reach a fixed point", [])
    if np.any(~np.isfinite(zeta)):
        raise ValueError("support set is not connected: some rays are unreachable from the base atom")

    # partner potentials: transform of zeta over Gamma_1 (including the vertex)
    m2 = len(P2)
    zeta2 = np.full(m2, float(cost.recession(0.0)) if np.any(~live1) else INF)
    for b in range(n1):
        d = rowwise_distance(np.repeat(P1[[b]], m2, axis=0), P2, space) if m2 else np.zeros(0)
        zeta2 = np.minimum(zeta2, cost.conj(np.full(m2, zeta[b]), d, side=2))
    return WalkPotential(P1, zeta, P2, zeta2, int(base_atom), anchor, rounds)
