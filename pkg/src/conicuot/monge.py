"""Transport-growth maps: pushforwards, induced couplings and map extraction.

A transport-growth map (T, g) on the support of mu1 moves the atom at x_i
to T(x_i) and multiplies its mass by g(x_i); g = 0 destroys the atom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cone import DiscreteMeasure, HomogeneousCoupling, Space
from .costs import CostFunction, ghk_inverse
from .dual import PotentialPair
from .primal import Instance, SemiCoupling, SolveOptions, solve_semicoupling

SNAP = 1e-9
CREATION_SHARE = 1e-9


@dataclass(frozen=True)
class TransportGrowthMap:
    T: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, float, copy=True).reshape(-1)
        T = np.array(self.T, float, copy=True).reshape(len(g), -1)
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise ValueError("growth must be finite and non-negative")
        if not np.all(np.isfinite(T)):
            raise ValueError("targets must be finite")
        for name, val in (("T", T), ("g", g)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def identity(cls, mu: DiscreteMeasure) -> "TransportGrowthMap":
        return cls(mu.positions, np.ones(len(mu)))

    def __len__(self) -> int:
        return len(self.g)

    def to_json(self) -> dict:
        return {"T": self.T.tolist(), "g": self.g.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "TransportGrowthMap":
        try:
            return cls(obj["T"], obj["g"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed map JSON: {exc}") from exc


def _check(tmap: TransportGrowthMap, mu1: DiscreteMeasure):
    if len(tmap) != len(mu1):
        raise ValueError(f"map has {len(tmap)} atoms, measure has {len(mu1)}")
    if len(mu1) and tmap.T.shape[1] != mu1.space.dim:
        raise ValueError("map targets and measure live in different dimensions")


def pushforward(tmap: TransportGrowthMap, mu1: DiscreteMeasure) -> DiscreteMeasure:
    """T_#(g mu1); targets within SNAP of each other are merged."""
    _check(tmap, mu1)
    mass = tmap.g * mu1.masses
    T = np.round(tmap.T / SNAP) * SNAP
    return DiscreteMeasure.from_arrays(T, mass, mu1.space, drop_zero=True)


def induced_coupling(tmap: TransportGrowthMap, mu1: DiscreteMeasure) -> HomogeneousCoupling:
    """One atom ([x_i, 1], [T(x_i), g(x_i)]) of weight m_i per atom of mu1."""
    _check(tmap, mu1)
    k = len(mu1)
    return HomogeneousCoupling(mu1.positions, np.ones(k), tmap.T, tmap.g, mu1.masses, 1.0)


def monge_cost(tmap: TransportGrowthMap, mu1: DiscreteMeasure, cost: CostFunction,
               verify: bool = False, opts: Optional[SolveOptions] = None) -> float:
    """sum_i m_i H([x_i, 1], [T(x_i), g(x_i)]).

    With verify=True the value is checked against the optimal cost between
    mu1 and the pushforward, which it can never undercut.
    """
    val = induced_coupling(tmap, mu1).cost(cost, mu1.space)
    if verify:
        best = solve_semicoupling(Instance(mu1, pushforward(tmap, mu1), cost), opts).value
        if val < best - 1e-9 * (1 + abs(best)):
            raise ArithmeticError(f"map cost {val} undercuts the optimal cost {best}")
    return val


# --------------------------------------------------------------------------
# extraction

@dataclass(frozen=True)
class MongeReport:
    monge_cost: float
    uot_value: float
    gap: float
    marginal_error: float
    marginal_tv: float
    pushforward_mass: float
    target_mass: float
    creation_mass: Optional[float]
    flagged: tuple
    neighbors: int
    bandwidth: float

    @property
    def relative_gap(self) -> float:
        return abs(self.gap) / (1.0 + abs(self.uot_value))

    def to_json(self) -> dict:
        return {
            "monge_cost": self.monge_cost, "uot_value": self.uot_value, "gap": self.gap,
            "relative_gap": self.relative_gap, "marginal_error": self.marginal_error,
            "marginal_tv": self.marginal_tv, "pushforward_mass": self.pushforward_mass,
            "target_mass": self.target_mass, "creation_mass": self.creation_mass,
            "flagged": list(self.flagged), "neighbors": self.neighbors, "bandwidth": self.bandwidth,
        }


def potential_gradient(positions: np.ndarray, phi: np.ndarray, k: Optional[int] = None) -> np.ndarray:
    """Least-squares affine fit of phi over the k nearest atoms (k = 2 dim + 1)."""
    X = np.asarray(positions, float)
    phi = np.asarray(phi, float)
    n, dim = X.shape
    k = min(n, k or 2 * dim + 1)
    if n < dim + 1:
        raise ValueError("too few atoms for a gradient stencil")
    _, nbr = cKDTree(X).query(X, k=k)
    nbr = np.asarray(nbr).reshape(n, k)
    grad = np.zeros((n, dim))
    for i in range(n):
        dx = X[nbr[i]] - X[i]
        M = np.hstack([np.ones((k, 1)), dx])
        coef = np.linalg.lstsq(M, phi[nbr[i]], rcond=None)[0]
        grad[i] = coef[1:]
    return grad


def smoothed_l1(mu: DiscreteMeasure, nu: DiscreteMeasure, bandwidth: float, points: int = 4096) -> float:
    """L1 distance between Gaussian-smoothed densities of two measures.

    Evaluated by a Riemann sum on a regular grid covering both supports
    padded by four bandwidths (about `points` grid nodes in total).
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    P = [m.positions for m in (mu, nu) if len(m)]
    if not P:
        return 0.0
    allp = np.vstack(P)
    dim = allp.shape[1]
    lo = allp.min(axis=0) - 4 * bandwidth
    hi = allp.max(axis=0) + 4 * bandwidth
    per = max(8, int(round(points ** (1.0 / dim))))
    axes = [np.linspace(lo[a], hi[a], per) for a in range(dim)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    cell = float(np.prod([(hi[a] - lo[a]) / (per - 1) for a in range(dim)]))
    norm = (2 * math.pi * bandwidth ** 2) ** (-dim / 2)

    def density(m: DiscreteMeasure):
        if not len(m):
            return np.zeros(len(grid))
        d2 = ((grid[:, None, :] - m.positions[None, :, :]) ** 2).sum(-1)
        return norm * np.exp(-0.5 * d2 / bandwidth ** 2) @ m.masses

    return float(np.sum(np.abs(density(mu) - density(nu))) * cell)


def extract_map(inst: Instance, potentials: PotentialPair, neighbors: Optional[int] = None,
                bandwidth: float = 0.25, value: Optional[float] = None,
                coupling: Optional[SemiCoupling] = None,
                opts: Optional[SolveOptions] = None) -> tuple[TransportGrowthMap, MongeReport]:
    """Apply the inverse of the cost partials to (grad phi1, phi1) at each atom.

    Needs a cost with an invertible partial map (the GHK builtin).  Atoms
    where the inverse does not exist are destroyed in the returned map and
    listed in `flagged`.  The marginal error compares the pushforward with
    mu2 after Gaussian smoothing of width `bandwidth` (the raw total
    variation on merged atoms is reported alongside); mass of mu2 that the
    coupling creates from nothing is reported, never fabricated into the map.
    """
    cost = inst.cost
    if cost.partial_inverse is None:
        raise ValueError(f"{cost.name} has no invertible partial map")
    if inst.space.matrix is not None:
        raise ValueError("map extraction needs a Euclidean space")
    mu1, mu2 = inst.mu1, inst.mu2
    m = len(mu1)
    phi1 = np.asarray(potentials.phi1, float)
    if phi1.shape != (m,):
        raise ValueError("potential does not match the first measure")
    if np.any(~np.isfinite(phi1)):
        raise ValueError("map extraction needs finite potentials on the first support")
    X = mu1.positions
    grad = potential_gradient(X, phi1, neighbors) if m > X.shape[1] else np.zeros_like(X)
    k_used = min(m, neighbors or 2 * X.shape[1] + 1)
    T = X.copy()
    g = np.zeros(m)
    flagged = []
    for i in range(m):
        try:
            offset, q = cost.partial_inverse(grad[i], phi1[i])
        except ValueError:
            flagged.append(i)
            continue
        if offset is not None:
            T[i] = X[i] + offset
            g[i] = q
    tmap = TransportGrowthMap(T, g)
    mc = monge_cost(tmap, mu1, cost)
    if value is None:
        value = solve_semicoupling(inst, opts).value
    push = pushforward(tmap, mu1)
    creation = None
    if coupling is not None:
        # cells holding a negligible share of their row's mass transport nothing
        created = (coupling.A <= CREATION_SHARE * mu1.masses[:, None]) & (coupling.B > 0)
        creation = float(np.sum(coupling.B[created]) + np.sum(coupling.created))
    report = MongeReport(
        monge_cost=mc,
        uot_value=float(value),
        gap=float(mc - value),
        marginal_error=smoothed_l1(push, mu2, bandwidth),
        marginal_tv=_snapped_tv(push, mu2),
        pushforward_mass=push.total_mass,
        target_mass=mu2.total_mass,
        creation_mass=creation,
        flagged=tuple(flagged),
        neighbors=int(k_used),
        bandwidth=float(bandwidth),
    )
    return tmap, report


def _snapped_tv(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Total variation between measures after merging atoms within SNAP."""
    if not len(mu) and not len(nu):
        return 0.0
    P = np.vstack([p for p in (mu.positions, nu.positions) if len(p)])
    keys = np.round(P / SNAP).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    diff = np.zeros(inv.max() + 1)
    np.add.at(diff, inv[:len(mu)], mu.masses)
    np.add.at(diff, inv[len(mu):], -nu.masses)
    return float(np.sum(np.abs(diff)))


def gaussian_grid_instance(resolution: int, cost: CostFunction, shift=(0.6, 0.0), mass_ratio: float = 1.2,
                           width: float = 0.5, half_width: float = 2.0) -> Instance:
    """Two smooth densities discretised on a resolution x resolution grid.

    mu1 is a Gaussian bump at the origin, mu2 a bump of the same width moved
    by `shift` and carrying `mass_ratio` times the mass.  Atom masses are
    density times cell area, so totals are nearly resolution independent.
    """
    ax = np.linspace(-half_width, half_width, resolution)
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    area = (ax[1] - ax[0]) ** 2 if resolution > 1 else (2 * half_width) ** 2
    s = np.asarray(shift, float)

    def bump(center):
        return np.exp(-0.5 * np.sum((X - center) ** 2, axis=1) / width ** 2) / (2 * math.pi * width ** 2)

    mu1 = DiscreteMeasure.from_arrays(X, bump(np.zeros(2)) * area, Space(2), drop_zero=True)
    mu2 = DiscreteMeasure.from_arrays(X, mass_ratio * bump(s) * area, Space(2), drop_zero=True)
    return Instance(mu1, mu2, cost)
