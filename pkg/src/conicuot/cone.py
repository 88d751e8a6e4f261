"""Cone points, discrete measures and homogeneous couplings.

A point of the cone C[X] is a pair [x, r]; every point with r = 0 is the
vertex.  Discrete measures are stored as (positions, masses) arrays and a
homogeneous coupling is a finite weighted list of pairs of cone points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

QUANTUM = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _quantize(x: np.ndarray) -> np.ndarray:
    """Integer keys for positions, equal iff coordinates agree to 1e-12."""
    return np.round(np.asarray(x, float) / QUANTUM).astype(np.int64)


def merge_positions(positions: np.ndarray, values: np.ndarray):
    """Merge rows with equal quantized positions, summing `values`.

    Returns (positions, summed values, inverse index).  First occurrence
    order is kept so that the result is deterministic.
    """
    positions = np.asarray(positions, float)
    if len(positions) == 0:
        return positions.reshape(0, positions.shape[1] if positions.ndim == 2 else 0), np.zeros(0), np.zeros(0, int)
    keys = _quantize(positions)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    inverse = rank[inverse]
    summed = np.zeros(len(first))
    np.add.at(summed, inverse, values)
    return positions[np.sort(first)], summed, inverse


@dataclass(frozen=True)
class Space:
    """Ground metric space: Euclidean R^dim or a finite precomputed metric.

    With a precomputed metric, positions are 1-d integer labels indexing
    the rows of `matrix`.
    """

    dim: int
    matrix: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dim < 0:
            raise ValueError("dimension must be non-negative")
        if self.matrix is not None:
            M = _frozen(self.matrix)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError("precomputed metric must be a square matrix")
            if np.any(M < 0) or np.any(np.abs(M - M.T) > 1e-12) or np.any(np.diag(M) != 0):
                raise ValueError("precomputed metric must be symmetric, non-negative, zero diagonal")
            if len(M) and np.any(M[:, None, :] > M[:, :, None] + M[None, :, :] + 1e-12):
                raise ValueError("precomputed metric violates the triangle inequality")
            if self.dim != 1:
                raise ValueError("precomputed metrics use 1-d integer labels")
            object.__setattr__(self, "matrix", M)

    @property
    def euclidean(self) -> bool:
        return self.matrix is None

    def distances(self, X, Y) -> np.ndarray:
        """Pairwise ground distances between the rows of X and Y."""
        X = np.atleast_2d(np.asarray(X, float)).reshape(-1, self.dim)
        Y = np.atleast_2d(np.asarray(Y, float)).reshape(-1, self.dim)
        if self.matrix is not None:
            i = X[:, 0].astype(int)
            j = Y[:, 0].astype(int)
            return self.matrix[np.ix_(i, j)]
        diff = X[:, None, :] - Y[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    def same(self, other: "Space") -> bool:
        if self.dim != other.dim:
            return False
        if (self.matrix is None) != (other.matrix is None):
            return False
        return self.matrix is None or np.array_equal(self.matrix, other.matrix)

    def to_json(self) -> dict:
        out = {"dim": self.dim}
        if self.matrix is not None:
            out["metric"] = self.matrix.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Space":
        if "dim" not in obj:
            raise ValueError("space needs a 'dim' field")
        return cls(int(obj["dim"]), obj.get("metric"))


@dataclass(frozen=True)
class ConePoint:
    """[x, r] in C[X]; x is None exactly at the vertex (r = 0)."""

    x: Optional[tuple]
    r: float

    def __post_init__(self):
        r = float(self.r)
        if not math.isfinite(r) or r < 0:
            raise ValueError(f"cone radius must be finite and non-negative, got {self.r}")
        object.__setattr__(self, "r", r)
        if r == 0.0:
            object.__setattr__(self, "x", None)
        elif self.x is None:
            raise ValueError("a point with positive radius needs a position")
        else:
            object.__setattr__(self, "x", tuple(float(v) for v in np.ravel(self.x)))

    @property
    def is_vertex(self) -> bool:
        return self.x is None

    def scaled(self, lam: float) -> "ConePoint":
        return ConePoint(self.x, lam * self.r)

    def key(self):
        if self.x is None:
            return None
        return (tuple(_quantize(np.array(self.x))), int(round(self.r / QUANTUM)))


VERTEX = ConePoint(None, 0.0)


def cone_distance_arrays(r1, r2, d, truncation=math.pi):
    """Vectorised cone distance from radii and ground distances."""
    r1, r2, d = np.broadcast_arrays(*(np.asarray(v, float) for v in (r1, r2, d)))
    cos = np.cos(np.minimum(d, truncation))
    sq = r1 * r1 + r2 * r2 - 2.0 * r1 * r2 * cos
    return np.sqrt(np.maximum(sq, 0.0))


def cone_distance(y1: ConePoint, y2: ConePoint, truncation: float = math.pi, space: Space | None = None) -> float:
    """Distance on C[X]: (r^2 + s^2 - 2 r s cos(d(x, y) ^ truncation))^(1/2)."""
    if not (np.isclose(truncation, math.pi) or np.isclose(truncation, math.pi / 2)):
        raise ValueError("truncation must be pi or pi/2")
    if y1.is_vertex or y2.is_vertex:
        return abs(y1.r - y2.r)
    if len(y1.x) != len(y2.x):
        raise ValueError("cone points live in different spaces")
    space = space or Space(len(y1.x))
    if len(y1.x) != space.dim:
        raise ValueError("cone points do not match the space dimension")
    d = space.distances([y1.x], [y2.x])[0, 0]
    return float(cone_distance_arrays(y1.r, y2.r, d, truncation))


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finite positive combination of Dirac masses on a Space.

    Atoms with equal positions (to 1e-12) are merged at construction and
    masses must be strictly positive; the null measure has no atoms.
    """

    positions: np.ndarray
    masses: np.ndarray
    space: Space

    def __post_init__(self):
        X = np.asarray(self.positions, float)
        m = np.asarray(self.masses, float).reshape(-1)
        if X.size == 0:
            X = X.reshape(0, self.space.dim)
        X = X.reshape(len(m), -1) if len(m) else X.reshape(0, self.space.dim)
        if X.shape[1] != self.space.dim:
            raise ValueError(f"positions have dimension {X.shape[1]}, space has {self.space.dim}")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(m)):
            raise ValueError("positions and masses must be finite")
        if np.any(m <= 0):
            raise ValueError("atom masses must be strictly positive")
        if self.space.matrix is not None and len(m):
            lab = X[:, 0]
            if np.any(lab != np.round(lab)) or lab.min() < 0 or lab.max() >= len(self.space.matrix):
                raise ValueError("positions must be valid labels of the precomputed metric")
        X, m, _ = merge_positions(X, m)
        object.__setattr__(self, "positions", _frozen(X))
        object.__setattr__(self, "masses", _frozen(m))

    @classmethod
    def null(cls, space: Space) -> "DiscreteMeasure":
        return cls(np.zeros((0, space.dim)), np.zeros(0), space)

    @classmethod
    def from_arrays(cls, positions, masses, space: Space | None = None, drop_zero: bool = True):
        X = np.asarray(positions, float)
        m = np.asarray(masses, float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(len(m), -1) if len(m) else X.reshape(0, 1)
        space = space or Space(X.shape[1])
        if drop_zero:
            keep = m > 0
            X, m = X[keep], m[keep]
        return cls(X, m, space)

    @classmethod
    def dirac(cls, x, mass: float = 1.0, space: Space | None = None):
        x = np.atleast_1d(np.asarray(x, float))
        return cls.from_arrays(x.reshape(1, -1), [mass], space)

    def __len__(self) -> int:
        return len(self.masses)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def atoms(self) -> Iterator[tuple[np.ndarray, float]]:
        for x, m in zip(self.positions, self.masses):
            yield x, float(m)

    def scaled(self, lam: float) -> "DiscreteMeasure":
        if lam < 0:
            raise ValueError("scaling factor must be non-negative")
        return DiscreteMeasure.from_arrays(self.positions, lam * self.masses, self.space)

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        if not self.space.same(other.space):
            raise ValueError("cannot add measures on different spaces")
        X = np.vstack([self.positions, other.positions])
        return DiscreteMeasure(X, np.concatenate([self.masses, other.masses]), self.space)

    def permuted(self, perm) -> "DiscreteMeasure":
        perm = np.asarray(perm, int)
        return DiscreteMeasure(self.positions[perm], self.masses[perm], self.space)

    def index_of(self, X) -> np.ndarray:
        """Atom index for each row of X (-1 when X is not a support point)."""
        X = np.asarray(X, float).reshape(-1, self.space.dim)
        lookup = {tuple(k): i for i, k in enumerate(_quantize(self.positions))}
        return np.array([lookup.get(tuple(k), -1) for k in _quantize(X)], int)

    def to_json(self) -> dict:
        return {
            "space": self.space.to_json(),
            "atoms": [{"x": x.tolist(), "m": float(m)} for x, m in self.atoms()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiscreteMeasure":
        try:
            space = Space.from_json(obj["space"])
            atoms = obj["atoms"]
            X = np.array([a["x"] for a in atoms], float).reshape(len(atoms), space.dim)
            m = np.array([a["m"] for a in atoms], float)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed measure JSON: {exc}") from exc
        return cls(X, m, space)


def _as_rows(x, k: int) -> np.ndarray:
    """Reshape positions to k rows; an empty array keeps its trailing dimension."""
    x = np.asarray(x, float)
    if k == 0:
        return x.reshape(0, x.shape[-1] if x.ndim >= 2 else 1)
    return x.reshape(k, -1)


@dataclass(frozen=True)
class HomogeneousCoupling:
    """Weighted atoms (y1, y2) on the product cone with homogeneity order p.

    Arrays: x1 (k, d1) and x2 (k, d2) hold positions (NaN rows at the
    vertex), r1, r2 the radii and w the weights.  Double-vertex atoms are
    dropped at construction.
    """

    x1: np.ndarray
    r1: np.ndarray
    x2: np.ndarray
    r2: np.ndarray
    w: np.ndarray
    p: float = 1.0

    def __post_init__(self):
        r1 = np.asarray(self.r1, float).reshape(-1)
        r2 = np.asarray(self.r2, float).reshape(-1)
        w = np.asarray(self.w, float).reshape(-1)
        k = len(w)
        x1 = _as_rows(self.x1, k)
        x2 = _as_rows(self.x2, k)
        if not (len(r1) == len(r2) == len(x1) == len(x2) == k):
            raise ValueError("coupling arrays have inconsistent lengths")
        if self.p < 1:
            raise ValueError("homogeneity order must be >= 1")
        for r in (r1, r2, w):
            if not np.all(np.isfinite(r)) or np.any(r < 0):
                raise ValueError("radii and weights must be finite and non-negative")
        keep = (w > 0) & ((r1 > 0) | (r2 > 0))
        x1, x2, r1, r2, w = x1[keep].copy(), x2[keep].copy(), r1[keep], r2[keep], w[keep]
        x1[r1 == 0] = np.nan
        x2[r2 == 0] = np.nan
        if np.any(~np.isfinite(x1[r1 > 0])) or np.any(~np.isfinite(x2[r2 > 0])):
            raise ValueError("non-vertex atoms need finite positions")
        for name, val in (("x1", x1), ("r1", r1), ("x2", x2), ("r2", r2), ("w", w)):
            object.__setattr__(self, name, _frozen(val))
        object.__setattr__(self, "p", float(self.p))

    @classmethod
    def from_points(cls, atoms: Sequence[tuple[ConePoint, ConePoint, float]], p: float = 1.0, dims=(1, 1)):
        d1, d2 = dims
        for y1, y2, _ in atoms:
            if not y1.is_vertex:
                d1 = len(y1.x)
            if not y2.is_vertex:
                d2 = len(y2.x)
        k = len(atoms)
        x1 = np.full((k, d1), np.nan)
        x2 = np.full((k, d2), np.nan)
        r1, r2, w = np.zeros(k), np.zeros(k), np.zeros(k)
        for a, (y1, y2, wt) in enumerate(atoms):
            if not y1.is_vertex:
                x1[a] = y1.x
            if not y2.is_vertex:
                x2[a] = y2.x
            r1[a], r2[a], w[a] = y1.r, y2.r, wt
        return cls(x1, r1, x2, r2, w, p)

    def __len__(self) -> int:
        return len(self.w)

    @property
    def dims(self) -> tuple[int, int]:
        return self.x1.shape[1], self.x2.shape[1]

    def points(self) -> Iterator[tuple[ConePoint, ConePoint, float]]:
        for a in range(len(self)):
            y1 = ConePoint(None if self.r1[a] == 0 else self.x1[a], self.r1[a])
            y2 = ConePoint(None if self.r2[a] == 0 else self.x2[a], self.r2[a])
            yield y1, y2, float(self.w[a])

    def replace(self, **kw) -> "HomogeneousCoupling":
        base = dict(x1=self.x1, r1=self.r1, x2=self.x2, r2=self.r2, w=self.w, p=self.p)
        base.update(kw)
        return HomogeneousCoupling(**base)

    def cost(self, cost, space1: Space | None = None, space2: Space | None = None) -> float:
        """Integral of the cost H against the coupling (+inf allowed)."""
        vals = cost.eval_arrays(self.x1, self.r1, self.x2, self.r2, space1 or Space(self.dims[0]))
        return float(_weighted_sum(self.w, vals))

    def to_json(self) -> dict:
        atoms = []
        for a in range(len(self)):
            atoms.append({
                "x1": None if self.r1[a] == 0 else self.x1[a].tolist(),
                "r1": float(self.r1[a]),
                "x2": None if self.r2[a] == 0 else self.x2[a].tolist(),
                "r2": float(self.r2[a]),
                "w": float(self.w[a]),
            })
        return {"p": self.p, "atoms": atoms}

    @classmethod
    def from_json(cls, obj: dict, dims=(1, 1)) -> "HomogeneousCoupling":
        try:
            atoms = [
                (ConePoint(a["x1"], a["r1"]) if a["x1"] is not None else VERTEX if a["r1"] == 0 else ConePoint(a["x1"], a["r1"]),
                 ConePoint(a["x2"], a["r2"]) if a["x2"] is not None else VERTEX if a["r2"] == 0 else ConePoint(a["x2"], a["r2"]),
                 float(a["w"]))
                for a in obj["atoms"]
            ]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed coupling JSON: {exc}") from exc
        return cls.from_points(atoms, float(obj.get("p", 1.0)), dims)


def _weighted_sum(w, vals) -> float:
    """Sum of w * vals with the convention 0 * inf = 0."""
    w = np.asarray(w, float)
    vals = np.asarray(vals, float)
    mask = w > 0
    return float(np.sum(w[mask] * vals[mask]))


def homogeneous_marginal(alpha: HomogeneousCoupling, side: int, space: Space | None = None) -> DiscreteMeasure:
    """p-homogeneous marginal: mass sum(w r_i^p) at each position x_i."""
    if side not in (1, 2):
        raise ValueError("side must be 1 or 2")
    X, r = (alpha.x1, alpha.r1) if side == 1 else (alpha.x2, alpha.r2)
    space = space or Space(X.shape[1])
    live = r > 0
    X, m, _ = merge_positions(X[live], alpha.w[live] * r[live] ** alpha.p)
    return DiscreteMeasure.from_arrays(X.reshape(-1, space.dim), m, space)


def dilate_normalize(alpha: HomogeneousCoupling) -> tuple[HomogeneousCoupling, float]:
    """Rescale atoms so the coupling becomes a probability measure.

    Each atom is divided by theta with theta^p = (r1^p + r2^p) / r* and its
    weight multiplied by theta^p, where r* = sum w (r1^p + r2^p).  The
    homogeneous marginals are unchanged.  Returns (coupling, r*).
    """
    p = alpha.p
    if len(alpha) == 0:
        return alpha, 0.0
    s = alpha.r1 ** p + alpha.r2 ** p
    rstar = float(np.sum(alpha.w * s))
    theta_p = s / rstar
    theta = theta_p ** (1.0 / p)
    out = alpha.replace(r1=alpha.r1 / theta, r2=alpha.r2 / theta, w=alpha.w * theta_p)
    return out, rstar


def radial_rescale(alpha: HomogeneousCoupling, q: float) -> HomogeneousCoupling:
    """Apply T_q: r -> r^(1/q) to both radii; order p becomes p*q."""
    if q < 1:
        raise ValueError("q must be >= 1")
    return alpha.replace(r1=alpha.r1 ** (1.0 / q), r2=alpha.r2 ** (1.0 / q), p=alpha.p * q)


def barycentric_projection(alpha: HomogeneousCoupling, cost=None, space: Space | None = None) -> HomogeneousCoupling:
    """Merge atoms sharing a position pair; radii become weighted means.

    Only defined for order p = 1, where it preserves the marginals.  If a
    radially convex cost is supplied, checks that the cost did not grow.
    """
    if alpha.p != 1.0:
        raise ValueError("barycentric projection needs homogeneity order 1")
    if len(alpha) == 0:
        return alpha
    # the vertex gets its own pseudo-position via a flag column
    k1 = np.hstack([np.nan_to_num(alpha.x1, nan=0.0), (alpha.r1 == 0)[:, None]])
    k2 = np.hstack([np.nan_to_num(alpha.x2, nan=0.0), (alpha.r2 == 0)[:, None]])
    keys = _quantize(np.hstack([k1, k2]))
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    inverse = rank[inverse]
    first = np.sort(first)
    n = len(first)
    W = np.zeros(n)
    R1 = np.zeros(n)
    R2 = np.zeros(n)
    np.add.at(W, inverse, alpha.w)
    np.add.at(R1, inverse, alpha.w * alpha.r1)
    np.add.at(R2, inverse, alpha.w * alpha.r2)
    out = HomogeneousCoupling(alpha.x1[first], R1 / W, alpha.x2[first], R2 / W, W, 1.0)
    if cost is not None and cost.radially_convex:
        before = alpha.cost(cost, space)
        after = out.cost(cost, space)
        if after > before + 1e-9 * (1.0 + abs(before)):
            raise ArithmeticError(f"barycentric projection increased the cost: {before} -> {after}")
    return out
