"""Dual problem: potentials, H-transforms and duality certificates.

A pair (phi1, phi2) on the two supports is feasible when
phi1_i r1 + phi2_j r2 <= H([x_i, r1], [y_j, r2]) for all radii, i.e. when
phi1_i <= inf_{g >= 0} H(1, g) - phi2_j g for every pair of atoms.
Values may be -inf (relaxed potentials); the convention 0 * (-inf) = 0 is
used when integrating against a mass that is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .primal import Instance, SolveReport

INF = math.inf


class InfeasiblePotential(ValueError):
    """Raised when an H-transform is unbounded below."""


@dataclass(frozen=True)
class PotentialPair:
    phi1: np.ndarray
    phi2: np.ndarray

    def __post_init__(self):
        for name in ("phi1", "phi2"):
            arr = np.array(getattr(self, name), float, copy=True).reshape(-1)
            if np.any(np.isnan(arr)):
                raise ValueError("potentials must not be NaN")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def value(self, inst: Instance) -> float:
        return _integrate(self.phi1, inst.mu1.masses) + _integrate(self.phi2, inst.mu2.masses)

    def to_json(self) -> dict:
        return {"phi1": [_enc(v) for v in self.phi1], "phi2": [_enc(v) for v in self.phi2]}

    @classmethod
    def from_json(cls, obj: dict) -> "PotentialPair":
        try:
            return cls([_dec(v) for v in obj["phi1"]], [_dec(v) for v in obj["phi2"]])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed potential JSON: {exc}") from exc


def _enc(v: float):
    if v == INF:
        return "inf"
    if v == -INF:
        return "-inf"
    return float(v)


def _dec(v):
    if isinstance(v, str):
        return {"inf": INF, "-inf": -INF}[v.strip().lower()]
    return float(v)


def _integrate(phi, mass) -> float:
    phi = np.asarray(phi, float)
    mass = np.asarray(mass, float)
    live = mass > 0
    if np.any(np.isneginf(phi[live])):
        return -INF
    return float(np.sum(phi[live] * mass[live]))


def _check_shapes(pair: PotentialPair, inst: Instance):
    m, n = inst.shape
    if pair.phi1.shape != (m,) or pair.phi2.shape != (n,):
        raise ValueError(f"potentials have shapes {pair.phi1.shape}, {pair.phi2.shape}; instance is {m} x {n}")


def slack_matrix(pair: PotentialPair, inst: Instance) -> np.ndarray:
    """inf_g [H(1, g) - phi2_j g] - phi1_i for every atom pair (>= 0 iff feasible)."""
    m, n = inst.shape
    phi2 = np.broadcast_to(pair.phi2[None, :], (m, n))
    conj = inst.cost.conj(phi2, inst.D, side=1)
    with np.errstate(invalid="ignore"):
        s = conj - pair.phi1[:, None]
    s = np.where(np.isneginf(pair.phi1)[:, None], INF, s)
    return np.where(np.isnan(s), -INF, s)


def feasible(pair: PotentialPair, inst: Instance, tol: float = 1e-9):
    """Dual feasibility test.  Returns (ok, max violation, worst pair or None)."""
    _check_shapes(pair, inst)
    m, n = inst.shape
    cost = inst.cost
    worst = 0.0
    where = None
    if m and n:
        S = slack_matrix(pair, inst)
        k = int(np.argmin(S))
        if -S.flat[k] > worst:
            worst = float(-S.flat[k])
            where = tuple(int(v) for v in np.unravel_index(k, S.shape))
    # constraints against the vertex: phi1 r1 <= H(r1, 0), phi2 r2 <= H(0, r2)
    v1 = pair.phi1 - float(cost.destruction(0.0))
    v2 = pair.phi2 - float(cost.recession(0.0))
    if not (m and n):
        for side, v in ((1, v1), (2, v2)):
            if len(v) and np.max(v) > worst:
                worst = float(np.max(v))
                where = (side, int(np.argmax(v)))
    return worst <= tol, worst, where


def h_transform(phi: np.ndarray, inst: Instance, direction: str = "1to2") -> np.ndarray:
    """H-transform of a potential on one support, evaluated on the other.

    direction "1to2": psi(y_j) = min_i inf_{r >= 0} H([x_i, r], [y_j, 1]) - r phi_i;
    direction "2to1": psi(x_i) = min_j inf_{r >= 0} H([x_i, 1], [y_j, r]) - r phi_j.
    """
    phi = np.asarray(phi, float)
    m, n = inst.shape
    cost = inst.cost
    if direction == "1to2":
        if phi.shape != (m,):
            raise ValueError("phi must live on the first support")
        base = np.full(n, float(cost.recession(0.0)))
        if m == 0:
            return base
        slope = np.asarray(cost.destruction(inst.D), float)
        bad = phi[:, None] > slope * (1 + 1e-12) + 1e-12
        if np.any(bad & ~np.isinf(slope)):
            i = int(np.argwhere(bad)[0][0])
            raise InfeasiblePotential(f"phi1[{i}] = {phi[i]} exceeds the destruction slope")
        # accepted values within round-off of the slope sit on it
        vals = cost.conj(np.minimum(phi[:, None], slope), inst.D, side=2)
        return np.min(vals, axis=0)
    if direction == "2to1":
        if phi.shape != (n,):
            raise ValueError("phi must live on the second support")
        base = np.full(m, float(cost.destruction(0.0)))
        if n == 0:
            return base
        slope = np.asarray(cost.recession(inst.D), float)
        bad = phi[None, :] > slope * (1 + 1e-12) + 1e-12
        if np.any(bad & ~np.isinf(slope)):
            j = int(np.argwhere(bad)[0][1])
            raise InfeasiblePotential(f"phi2[{j}] = {phi[j]} exceeds the creation slope")
        vals = cost.conj(np.minimum(phi[None, :], slope), inst.D, side=1)
        return np.min(vals, axis=1)
    raise ValueError("direction must be '1to2' or '2to1'")


@dataclass
class DualOptions:
    """tol: relative stall threshold; sweep_limit: largest m * n for which
    stalled transforms are followed by coordinate line searches."""

    tol: float = 1e-12
    max_iter: int = 100
    sweep_limit: int = 10_000


@dataclass
class DualReport:
    value: float
    pair: PotentialPair
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    instance_fingerprint: str = ""


def dual_ascent(inst: Instance, opts: DualOptions | None = None, init: Optional[np.ndarray] = None) -> DualReport:
    """Alternate H-transforms starting from phi1 (zero by default).

    Every iterate (phi1, phi1^H) is feasible by construction and the dual
    value is non-decreasing.  When the transforms stall, coordinate line
    searches on phi2 (small instances only, see `sweep_limit`) continue the
    ascent; passing the solver multipliers as `init` starts next to an
    optimal pair.
    """
    opts = opts or DualOptions()
    m, n = inst.shape
    phi1 = np.zeros(m) if init is None else np.array(init, float)
    if phi1.shape != (m,):
        raise ValueError("init must live on the first support")
    # clip to the destruction slope so the first transform is bounded
    slope = np.asarray(inst.cost.destruction(inst.D), float)
    if m and n:
        phi1 = np.minimum(phi1, slope.min(axis=1))
    history = []
    prev = -INF
    pair = None
    it = 0
    converged = False
    for it in range(1, opts.max_iter + 1):
        phi2 = h_transform(phi1, inst, "1to2")
        phi1 = h_transform(phi2, inst, "2to1")
        pair = PotentialPair(phi1, phi2)
        v = pair.value(inst)
        history.append(v)
        if np.isfinite(v) and np.isfinite(prev) and abs(v - prev) <= opts.tol * (1 + abs(v)):
            # alternate transforms stall at kinks of the dual; try moving
            # single coordinates of phi2 before declaring convergence
            if m and n and m * n <= opts.sweep_limit:
                swept = _coordinate_sweep(phi2, inst)
                phi1 = h_transform(swept, inst, "2to1")
                cand = PotentialPair(phi1, h_transform(phi1, inst, "1to2"))
                if cand.value(inst) > v + opts.tol * (1 + abs(v)):
                    pair = cand
                    prev = cand.value(inst)
                    history.append(prev)
                    phi1 = cand.phi1
                    continue
                phi1 = pair.phi1
            converged = True
            break
        prev = v
    if pair is None:
        pair = PotentialPair(phi1, h_transform(phi1, inst, "1to2"))
    return DualReport(pair.value(inst), pair, it, converged, history, inst.fingerprint)


def _coordinate_sweep(phi2: np.ndarray, inst: Instance) -> np.ndarray:
    """Exact line maximisation of the reduced dual in each coordinate of phi2.

    The reduced dual F(phi2) = sum_i a_i min_j conj_ij(phi2_j) + sum_j b_j phi2_j
    is concave, so every one-dimensional restriction is unimodal.
    """
    cost = inst.cost
    a, b = inst.mu1.masses, inst.mu2.masses
    D = inst.D
    m, n = inst.shape
    phi2 = np.array(phi2, float)
    C = cost.conj(np.broadcast_to(phi2[None, :], (m, n)), D, side=1)
    upper = np.min(np.asarray(cost.recession(D), float) * np.ones((m, n)), axis=0)
    for j in range(n):
        rest = np.min(np.delete(C, j, axis=1), axis=1) if n > 1 else np.full(m, INF)

        def neg_f(t, j=j, rest=rest):
            col = cost.conj(np.full(m, t), D[:, j], side=1)
            val = _integrate(np.minimum(col, rest), a) + b[j] * t
            return -val if np.isfinite(val) else 1e300

        hi = float(upper[j])
        cur = min(float(phi2[j]), hi) if np.isfinite(phi2[j]) else hi - 1.0
        step = 1.0 + abs(cur)
        lo = cur - step
        # widen downwards until the restriction is increasing at lo
        while neg_f(lo) < neg_f(lo + 1e-6 * step) and step < 1e12:
            step *= 2
            lo = cur - step
        res = minimize_scalar(neg_f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
        if res.fun < neg_f(phi2[j]):
            phi2[j] = res.x
            C[:, j] = cost.conj(np.full(m, res.x), D[:, j], side=1)
    return phi2


@dataclass(frozen=True)
class Certificate:
    gap: float
    primal_value: float
    dual_value: float

    @property
    def relative_gap(self) -> float:
        return self.gap / (1.0 + abs(self.primal_value))

    def to_json(self) -> dict:
        return {"gap": self.gap, "primal": self.primal_value, "dual": self.dual_value}


def duality_gap(primal: SolveReport, dual: DualReport) -> Certificate:
    """primal value - dual value for reports computed on the same instance."""
    if primal.instance_fingerprint and dual.instance_fingerprint and \
            primal.instance_fingerprint != dual.instance_fingerprint:
        raise ValueError("primal and dual reports refer to different instances")
    gap = primal.value - dual.value
    if gap < -1e-9 * (1.0 + abs(primal.value)):
        raise ArithmeticError(f"weak duality violated: primal {primal.value} < dual {dual.value}")
    return Certificate(max(gap, 0.0), primal.value, dual.value)


def complementary_slackness(alpha, pair: PotentialPair, inst: Instance, tol: float = 1e-6) -> list:
    """Atoms of `alpha` where phi1 r1 + phi2 r2 < H - tol (1 + H).

    An empty list together with feasibility of the pair certifies that both
    the coupling and the pair are optimal.  An infeasible pair is reported
    as a leading entry of kind "infeasible".
    """
    _check_shapes(pair, inst)
    out = []
    ok, worst, where = feasible(pair, inst, tol)
    if not ok:
        out.append({"kind": "infeasible", "where": list(where) if where else None, "violation": worst})
    if len(alpha) == 0:
        return out
    H = inst.cost.eval_arrays(alpha.x1, alpha.r1, alpha.x2, alpha.r2, inst.space)
    dual = np.zeros(len(alpha))
    for side, x, r, mu, phi in ((1, alpha.x1, alpha.r1, inst.mu1, pair.phi1),
                                (2, alpha.x2, alpha.r2, inst.mu2, pair.phi2)):
        live = r > 0
        idx = mu.index_of(x[live]) if np.any(live) else np.zeros(0, int)
        if np.any(idx < 0):
            a = int(np.flatnonzero(live)[np.argmax(idx < 0)])
            raise ValueError(f"coupling atom {a} sits outside the support of mu{side}")
        with np.errstate(invalid="ignore"):
            dual[live] += phi[idx] * r[live]
    with np.errstate(invalid="ignore"):
        slack = H - dual
    for a in np.flatnonzero(~(slack <= tol * (1.0 + np.abs(H)))):
        out.append({"kind": "slack", "atom": int(a), "slack": float(slack[a])})
    return out
