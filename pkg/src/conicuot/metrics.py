"""Distances built from metric-power costs and property suites around them.

For a cost H that is the p-th power of a cone metric, U_H^(1/p) is a
distance between non-negative measures.  This module wraps it, tests the
metric axioms on random triples, compares the semi-coupling value with
classical transport between lifts to the cone, and reports convergence
diagnostics for sequences of measures.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .cone import QUANTUM, DiscreteMeasure, HomogeneousCoupling, Space
from .costs import CostFunction
from .primal import Instance, SolveOptions, solve_semicoupling, to_homogeneous_coupling

INF = math.inf


def _metric_power(cost: CostFunction, p: Optional[float]) -> float:
    if cost.metric_power is None:
        raise ValueError(f"{cost.name} is not a power of a cone metric")
    if p is not None and not np.isclose(p, cost.metric_power):
        raise ValueError(f"{cost.name} is a power {cost.metric_power:g} of a metric, not {p:g}")
    return float(cost.metric_power)


def uot_distance(mu1: DiscreteMeasure, mu2: DiscreteMeasure, cost: CostFunction,
                 p: Optional[float] = None, opts: Optional[SolveOptions] = None) -> float:
    """U_H(mu1, mu2)^(1/p) for a cost flagged as a p-th metric power."""
    p = _metric_power(cost, p)
    value = solve_semicoupling(Instance(mu1, mu2, cost), opts).value
    return max(value, 0.0) ** (1.0 / p)


# --------------------------------------------------------------------------
# classical transport between measures on the cone

@dataclass(frozen=True)
class ConeMeasure:
    """Weighted cone points; NaN position rows (or r = 0) denote the vertex."""

    x: np.ndarray
    r: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, float).reshape(-1)
        r = np.asarray(self.r, float).reshape(-1)
        x = np.array(self.x, float, copy=True).reshape(len(w), -1)
        if len(r) != len(w):
            raise ValueError("radii and weights have different lengths")
        if np.any(w < 0) or np.any(r < 0) or not np.all(np.isfinite(w)) or not np.all(np.isfinite(r)):
            raise ValueError("radii and weights must be finite and non-negative")
        x[r == 0] = np.nan
        for name, val in (("x", x), ("r", r), ("w", w)):
            val = np.array(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return len(self.w)

    @property
    def total_weight(self) -> float:
        return float(self.w.sum())

    def homogeneous_marginal(self, space: Space) -> DiscreteMeasure:
        """The measure sum w r delta_x (vertex atoms carry no mass)."""
        live = self.r > 0
        return DiscreteMeasure.from_arrays(self.x[live].reshape(-1, space.dim),
                                           self.w[live] * self.r[live], space)

    @classmethod
    def projections(cls, alpha: HomogeneousCoupling) -> tuple["ConeMeasure", "ConeMeasure"]:
        return cls(alpha.x1, alpha.r1, alpha.w), cls(alpha.x2, alpha.r2, alpha.w)


def cone_lift_ot(alpha1: ConeMeasure, alpha2: ConeMeasure, cost: CostFunction,
                 space: Optional[Space] = None) -> float:
    """Optimal transport between two cone measures with H as ground cost.

    Unequal total weights admit no transport plan and give +inf.  Solved as
    a transportation linear program.
    """
    w1, w2 = alpha1.total_weight, alpha2.total_weight
    if abs(w1 - w2) > 1e-12 * max(1.0, w1, w2):
        return INF
    k1, k2 = len(alpha1), len(alpha2)
    if k1 == 0 or k2 == 0 or w1 == 0:
        return 0.0
    dim = alpha1.x.shape[1] if alpha1.x.size else alpha2.x.shape[1]
    space = space or Space(dim)
    I, J = np.meshgrid(np.arange(k1), np.arange(k2), indexing="ij")
    I, J = I.ravel(), J.ravel()
    C = cost.eval_arrays(alpha1.x[I], alpha1.r[I], alpha2.x[J], alpha2.r[J], space)
    both_vertex = (alpha1.r[I] == 0) & (alpha2.r[J] == 0)
    C = np.where(both_vertex, 0.0, C)
    finite = np.isfinite(C)
    # equality constraints: row sums w1, column sums w2 (one column sum is redundant)
    rows = np.zeros((k1 + k2, k1 * k2))
    rows[I, np.arange(k1 * k2)] = 1.0
    rows[k1 + J, np.arange(k1 * k2)] = 1.0
    rhs = np.concatenate([alpha1.w, alpha2.w * (w1 / w2)])
    bounds = [(0, None) if f else (0, 0) for f in finite]
    res = linprog(np.where(finite, C, 0.0), A_eq=rows[:-1], b_eq=rhs[:-1], bounds=bounds, method="highs")
    if res.status == 2:
        return INF
    if res.status != 0:
        raise ArithmeticError(f"transport LP failed: {res.message}")
    return float(res.fun)


@dataclass(frozen=True)
class LiftReport:
    uot_value: float
    optimal_lift_value: float
    sampled_min: float
    samples: int
    agreement: float

    def to_json(self) -> dict:
        return {"uot_value": self.uot_value, "optimal_lift_value": self.optimal_lift_value,
                "sampled_min": self.sampled_min, "samples": self.samples, "agreement": self.agreement}


def _random_lift(mu: DiscreteMeasure, weights: np.ndarray) -> ConeMeasure:
    """Lift mu by splitting each atom over weights w_k with radii m_i w_i / w_k."""
    return ConeMeasure(mu.positions, mu.masses / weights, weights)


def _balance(alpha: ConeMeasure, total: float) -> ConeMeasure:
    """Pad with a vertex atom up to the given total weight."""
    extra = total - alpha.total_weight
    if extra <= 0:
        return alpha
    dim = alpha.x.shape[1]
    return ConeMeasure(np.vstack([alpha.x, np.full((1, dim), np.nan)]),
                       np.append(alpha.r, 0.0), np.append(alpha.w, extra))


def compare_lift(mu1: DiscreteMeasure, mu2: DiscreteMeasure, cost: CostFunction,
                 samples: int = 8, seed: int = 0, tol: float = 1e-5,
                 opts: Optional[SolveOptions] = None) -> LiftReport:
    """U_H against transport between cone lifts of the two measures.

    The projections of the optimal coupling give lifts whose transport cost
    equals U_H; every other lift can only cost more.  Random lifts (random
    per-atom weights, padded with the vertex to equal weight) probe the
    second claim.  Raises ArithmeticError when either claim fails by more
    than tol (1 + U).
    """
    inst = Instance(mu1, mu2, cost)
    rep = solve_semicoupling(inst, opts)
    value = rep.value
    alpha = to_homogeneous_coupling(rep.coupling, inst)
    if len(alpha):
        a1, a2 = ConeMeasure.projections(alpha)
        opt_lift = cone_lift_ot(a1, a2, cost, inst.space)
    else:
        opt_lift = 0.0
    rng = np.random.default_rng(seed)
    sampled = INF
    for _ in range(samples if len(mu1) and len(mu2) else 0):
        l1 = _random_lift(mu1, rng.uniform(0.2, 2.0, len(mu1)))
        l2 = _random_lift(mu2, rng.uniform(0.2, 2.0, len(mu2)))
        total = max(l1.total_weight, l2.total_weight)
        sampled = min(sampled, cone_lift_ot(_balance(l1, total), _balance(l2, total), cost, inst.space))
    scale = 1.0 + abs(value)
    if abs(opt_lift - value) > tol * scale:
        raise ArithmeticError(f"optimal lift costs {opt_lift}, semi-coupling value is {value}")
    if sampled < value - tol * scale:
        raise ArithmeticError(f"a sampled lift costs {sampled} < {value}")
    return LiftReport(value, opt_lift, sampled, samples, abs(opt_lift - value))


# --------------------------------------------------------------------------
# metric axioms on random triples

@dataclass(frozen=True)
class MetricReport:
    """Worst defects over the sampled triples with the triples achieving them."""

    cost: str
    p: float
    samples: int
    seed: int
    symmetry_defect: float
    symmetry_witness: Optional[int]
    identity_defect: float
    identity_witness: Optional[int]
    worst_triangle_slack: float
    triangle_witness: Optional[int]
    triangle_violations: int
    separation_failures: int
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return (self.triangle_violations == 0 and self.separation_failures == 0
                and self.symmetry_defect <= self.tol and self.identity_defect <= self.tol)

    def to_json(self) -> dict:
        return {
            "cost": self.cost, "p": self.p, "samples": self.samples, "seed": self.seed,
            "symmetry_defect": self.symmetry_defect, "symmetry_witness": self.symmetry_witness,
            "identity_defect": self.identity_defect, "identity_witness": self.identity_witness,
            "worst_triangle_slack": self.worst_triangle_slack, "triangle_witness": self.triangle_witness,
            "triangle_violations": self.triangle_violations,
            "separation_failures": self.separation_failures, "tol": self.tol, "passed": self.passed,
        }


def random_measure(rng: np.random.Generator, dim: int = 2, max_atoms: int = 4,
                   null_prob: float = 0.05, box: float = 1.5) -> DiscreteMeasure:
    """A measure with 1..max_atoms atoms in [-box, box]^dim, masses in [0.2, 2]."""
    space = Space(dim)
    if rng.random() < null_prob:
        return DiscreteMeasure.null(space)
    k = int(rng.integers(1, max_atoms + 1))
    return DiscreteMeasure.from_arrays(rng.uniform(-box, box, (k, dim)), rng.uniform(0.2, 2.0, k), space)


def triple_measures(seed: int, index: int, dim: int = 2) -> list[DiscreteMeasure]:
    """The index-th random triple of a seeded suite (independent of threading).

    Every third triple replaces its last measure by a perturbed copy of the
    first one.
    """
    rng = np.random.default_rng([seed, index])
    mus = [random_measure(rng, dim) for _ in range(3)]
    if index % 3 == 2 and len(mus[0]):
        # a small perturbation of the first measure makes the triangle tight
        X = mus[0].positions + rng.normal(0.0, 0.05, mus[0].positions.shape)
        m = mus[0].masses * rng.uniform(0.9, 1.1, len(mus[0]))
        mus[2] = DiscreteMeasure.from_arrays(X, m, mus[0].space)
    return mus


def _canonical(mu: DiscreteMeasure) -> DiscreteMeasure:
    """Atoms re-merged on the 1e-12 lattice and sorted lexicographically."""
    if not len(mu):
        return mu
    X = np.round(mu.positions / QUANTUM) * QUANTUM
    order = np.lexsort(X.T[::-1])
    return DiscreteMeasure(X[order], mu.masses[order], mu.space)


def _same(mu: DiscreteMeasure, nu: DiscreteMeasure) -> bool:
    a, b = _canonical(mu), _canonical(nu)
    return (len(a) == len(b) and np.array_equal(a.positions, b.positions)
            and bool(np.all(np.abs(a.masses - b.masses) <= QUANTUM)))


def _triple_defects(cost, p, seed, index, opts):
    mus = triple_measures(seed, index)
    dist = {}
    for i in range(3):
        for j in range(3):
            nu = mus[j] if i != j else mus[i].permuted(np.arange(len(mus[i]))[::-1])
            dist[i, j] = uot_distance(mus[i], nu, cost, p, opts)
    sym = max(abs(dist[i, j] - dist[j, i]) for i in range(3) for j in range(i + 1, 3))
    ident = max(dist[i, i] for i in range(3))
    sep = sum(1 for i in range(3) for j in range(i + 1, 3)
              if dist[i, j] <= 1e-9 and not _same(mus[i], mus[j]))
    tri = min(dist[i, k] + dist[k, j] - dist[i, j]
              for i in range(3) for j in range(3) for k in range(3) if len({i, j, k}) == 3)
    return sym, ident, tri, sep


def metric_axioms_test(cost: CostFunction, p: Optional[float] = None, n_samples: int = 500,
                       seed: int = 0, threads: int = 1, tol: float = 1e-9,
                       opts: Optional[SolveOptions] = None) -> MetricReport:
    """Symmetry, identity of indiscernibles and the triangle inequality.

    Each triple draws three random measures (occasionally null).  The
    identity defect compares every measure with a reordered copy of itself;
    a separation failure is a distance <= 1e-9 between different measures.
    """
    p = _metric_power(cost, p)
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")

    def run(t):
        return _triple_defects(cost, p, seed, t, opts)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(n_samples)))
    else:
        results = [run(t) for t in range(n_samples)]
    if not results:
        return MetricReport(cost.name, p, 0, seed, 0.0, None, 0.0, None, INF, None, 0, 0, tol)
    sym = np.array([r[0] for r in results])
    ident = np.array([r[1] for r in results])
    tri = np.array([r[2] for r in results])
    sep = sum(r[3] for r in results)
    return MetricReport(
        cost=cost.name, p=p, samples=n_samples, seed=seed,
        symmetry_defect=float(sym.max()), symmetry_witness=int(sym.argmax()),
        identity_defect=float(ident.max()), identity_witness=int(ident.argmax()),
        worst_triangle_slack=float(tri.min()), triangle_witness=int(tri.argmin()),
        triangle_violations=int(np.sum(tri < -tol)), separation_failures=int(sep), tol=tol,
    )


# --------------------------------------------------------------------------
# convergence diagnostics

@dataclass(frozen=True)
class ConvergenceReport:
    distances: list
    weak_defects: list
    moment_defects: list
    distance_vanishes: bool
    weak_vanishes: bool
    moment_vanishes: bool

    @property
    def consistent(self) -> bool:
        """Distance vanishes exactly when both surrogates vanish."""
        return self.distance_vanishes == (self.weak_vanishes and self.moment_vanishes)

    def to_json(self) -> dict:
        return {"distances": self.distances, "weak_defects": self.weak_defects,
                "moment_defects": self.moment_defects, "distance_vanishes": self.distance_vanishes,
                "weak_vanishes": self.weak_vanishes, "moment_vanishes": self.moment_vanishes,
                "consistent": self.consistent}


def default_test_functions(limit: DiscreteMeasure, width: float = 1.0) -> list[Callable]:
    """Clamped coordinates and Gaussian bumps centred at the limit's atoms."""
    dim = limit.space.dim
    reach = 1.0 + (float(np.max(np.abs(limit.positions))) if len(limit) else 0.0)
    fns: list[Callable] = []
    for a in range(dim):
        fns.append(lambda X, a=a: np.clip(X[:, a], -reach, reach))
    for c in limit.positions:
        fns.append(lambda X, c=c: np.exp(-0.5 * np.sum((X - c) ** 2, axis=1) / width ** 2))
    return fns


def _integral(fn, mu: DiscreteMeasure) -> float:
    if not len(mu):
        return 0.0
    return float(np.asarray(fn(mu.positions), float) @ mu.masses)


def _vanishes(seq: Sequence[float], shrink: float, atol: float) -> bool:
    """Last term is at most `shrink` times the largest term (or below atol)."""
    if not len(seq):
        return True
    last = abs(seq[-1])
    return last <= atol or last <= shrink * max(abs(v) for v in seq)


def convergence_diag(sequence: Sequence[DiscreteMeasure], limit: DiscreteMeasure, cost: CostFunction,
                     p: Optional[float] = None, test_functions: Optional[Sequence[Callable]] = None,
                     shrink: float = 0.1, atol: float = 1e-9,
                     opts: Optional[SolveOptions] = None) -> ConvergenceReport:
    """Distances to the limit next to weak-convergence and moment surrogates.

    The weak surrogate is max_k |int xi_k d mu_n - int xi_k d mu| over the
    test functions; the moment surrogate compares the integrals of
    H([x, 1], vertex).  A quantity "vanishes" when its last value is at most
    `shrink` times its largest value along the sequence (or below atol).
    """
    p = _metric_power(cost, p)
    fns = list(test_functions) if test_functions is not None else default_test_functions(limit)
    ref = [_integral(fn, limit) for fn in fns]

    def moment(mu):
        if not len(mu):
            return 0.0
        return float(np.asarray(cost.destruction(np.zeros(len(mu))), float) @ mu.masses)

    m_ref = moment(limit)
    dists, weak, mom = [], [], []
    for mu in sequence:
        dists.append(uot_distance(mu, limit, cost, p, opts))
        weak.append(max((abs(_integral(fn, mu) - r) for fn, r in zip(fns, ref)), default=0.0))
        mom.append(abs(moment(mu) - m_ref))
    return ConvergenceReport(dists, weak, mom, _vanishes(dists, shrink, atol),
                             _vanishes(weak, shrink, atol), _vanishes(mom, shrink, atol))
