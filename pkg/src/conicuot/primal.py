"""Primal problem: optimal semi-couplings between discrete measures.

For measures mu1 = sum a_i delta_{x_i} and mu2 = sum b_j delta_{y_j} a
semi-coupling is a pair of non-negative matrices (A, B) with row sums of
A equal to a and column sums of B equal to b.  Its cost is
sum_ij H([x_i, A_ij], [y_j, B_ij]), which for radially convex H equals the
unbalanced transport cost of the corresponding homogeneous coupling.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.optimize import linprog

from .cone import DiscreteMeasure, HomogeneousCoupling, Space, homogeneous_marginal
from .costs import CostFunction, _envelope_profile, cost_from_spec, envelope_cost

INF = math.inf


@dataclass(frozen=True)
class Instance:
    """A transport problem: two measures on the same space and a cost."""

    mu1: DiscreteMeasure
    mu2: DiscreteMeasure
    cost: CostFunction

    def __post_init__(self):
        if not self.mu1.space.same(self.mu2.space):
            raise ValueError("both measures must live on the same space")

    @property
    def space(self) -> Space:
        return self.mu1.space

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.mu1), len(self.mu2)

    @cached_property
    def D(self) -> np.ndarray:
        """Ground distance matrix between the two supports."""
        m, n = self.shape
        if m == 0 or n == 0:
            return np.zeros((m, n))
        return self.space.distances(self.mu1.positions, self.mu2.positions)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for arr in (self.mu1.positions, self.mu1.masses, self.mu2.positions, self.mu2.masses):
            h.update(np.ascontiguousarray(arr).tobytes())
            h.update(b"|")
        h.update(json.dumps(self.cost.to_spec(), sort_keys=True).encode())
        return h.hexdigest()

    def with_cost(self, cost: CostFunction) -> "Instance":
        return Instance(self.mu1, self.mu2, cost)

    def to_json(self) -> dict:
        return {"mu1": self.mu1.to_json(), "mu2": self.mu2.to_json(), "cost": self.cost.to_spec()}

    @classmethod
    def from_json(cls, obj: dict, cost: CostFunction | None = None) -> "Instance":
        try:
            mu1 = DiscreteMeasure.from_json(obj["mu1"])
            mu2 = DiscreteMeasure.from_json(obj["mu2"])
        except KeyError as exc:
            raise ValueError(f"instance JSON lacks {exc}") from exc
        if cost is None:
            if "cost" not in obj:
                raise ValueError("instance JSON lacks a cost")
            cost = cost_from_spec(obj["cost"])
        return cls(mu1, mu2, cost)


@dataclass(frozen=True)
class SemiCoupling:
    """Matrices (A, B) plus vertex columns for pure destruction/creation.

    `destroyed[i]` is mass of mu1 sent to the vertex and `created[j]` mass
    of mu2 coming from it; they are only needed when the other measure is
    null and are zero otherwise.
    """

    A: np.ndarray
    B: np.ndarray
    destroyed: np.ndarray
    created: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "destroyed", "created"):
            arr = np.array(getattr(self, name), float, copy=True)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.A.shape != self.B.shape:
            raise ValueError("A and B must have the same shape")
        m, n = self.A.shape
        if self.destroyed.shape != (m,) or self.created.shape != (n,):
            raise ValueError("vertex columns have the wrong length")

    @classmethod
    def from_matrices(cls, A, B) -> "SemiCoupling":
        A = np.asarray(A, float)
        return cls(A, B, np.zeros(A.shape[0]), np.zeros(A.shape[1]))

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.A.sum(axis=1) + self.destroyed, self.B.sum(axis=0) + self.created

    def marginal_error(self, inst: Instance) -> float:
        a, b = self.marginals()
        err = 0.0
        if len(a):
            err = max(err, float(np.max(np.abs(a - inst.mu1.masses) / inst.mu1.masses)))
        if len(b):
            err = max(err, float(np.max(np.abs(b - inst.mu2.masses) / inst.mu2.masses)))
        return err

    def value(self, inst: Instance) -> float:
        cost = inst.cost
        total = _cell_sum(cost, self.A, self.B, inst.D)
        if np.any(self.destroyed > 0):
            total += float(np.sum(cost.radial(self.destroyed, 0.0, 0.0)))
        if np.any(self.created > 0):
            total += float(np.sum(cost.radial(0.0, self.created, 0.0)))
        return total

    def permuted(self, p1, p2) -> "SemiCoupling":
        return SemiCoupling(self.A[np.ix_(p1, p2)], self.B[np.ix_(p1, p2)],
                            self.destroyed[p1], self.created[p2])


def _cell_sum(cost: CostFunction, A, B, D) -> float:
    if A.size == 0:
        return 0.0
    live = (A > 0) | (B > 0)
    if not np.any(live):
        return 0.0
    vals = cost.radial(A[live], B[live], D[live])
    return float(np.sum(vals))


@dataclass
class SolveOptions:
    """Solver configuration.

    method: "auto" picks barrier Newton for smooth finite costs with a
    closed-form Hessian and the ray LP followed by projected gradient
    otherwise; "newton", "lp" and "apg" force a method.
    """

    tol: float = 1e-6
    max_iter: int = 5000
    method: str = "auto"
    gap_target: float = 1e-12
    lp_rays: int = 257
    envelope_resolution: int = 2048
    zero_threshold: float = 1e-13
    seed: int = 0


@dataclass
class SolveReport:
    value: float
    coupling: SemiCoupling
    iterations: int
    kkt_residual: float
    wall_time: float
    converged: bool
    method: str
    envelope_substituted: bool = False
    phi1: Optional[np.ndarray] = None
    phi2: Optional[np.ndarray] = None
    message: str = ""
    instance_fingerprint: str = ""

    def summary(self) -> dict:
        return {
            "value": self.value,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "converged": self.converged,
            "method": self.method,
            "envelope_substituted": self.envelope_substituted,
            "message": self.message,
        }


# --------------------------------------------------------------------------
# simplex projections

def project_rows(X: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of X onto {x >= 0, sum x = radius}."""
    m, n = X.shape
    if n == 0:
        return X.copy()
    U = -np.sort(-X, axis=1)
    css = np.cumsum(U, axis=1) - radius[:, None]
    ind = np.arange(1, n + 1)
    cond = U - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(m), rho] / (rho + 1)
    return np.maximum(X - tau[:, None], 0.0)


def project_semicoupling(A, B, a, b):
    return project_rows(A, a), project_rows(B.T, b).T


def _exact_marginals(A, B, a, b, threshold):
    """Drop negligible entries, then rescale rows of A and columns of B."""
    A = np.where(A < threshold * a[:, None], 0.0, A)
    B = np.where(B < threshold * b[None, :], 0.0, B)
    rs = A.sum(axis=1)
    cs = B.sum(axis=0)
    # a row can only be emptied if every entry was negligible; restore the largest
    for i in np.flatnonzero(rs == 0):
        A[i, :] = a[i] / A.shape[1]
        rs[i] = a[i]
    for j in np.flatnonzero(cs == 0):
        B[:, j] = b[j] / B.shape[0]
        cs[j] = b[j]
    A = A * (a / rs)[:, None]
    B = B * (b / cs)[None, :]
    return A, B


# --------------------------------------------------------------------------
# barrier Newton method

def _ipm(a, b, D, cost: CostFunction, opts: SolveOptions):
    m, n = D.shape
    A = np.outer(a, np.ones(n)) / n
    B = np.outer(np.ones(m), b) / m
    N = 2.0 * m * n

    def F_of(A, B):
        return float(np.sum(cost.radial(A, B, D)))

    F = F_of(A, B)
    t = N / max(abs(F), 1e-2)
    mu = 10.0
    iters = 0
    nu1 = np.zeros(m)
    nu2 = np.zeros(n)
    message = ""
    converged = False
    while iters < opts.max_iter:
        # centering
        for _ in range(60):
            if iters >= opts.max_iter:
                break
            iters += 1
            g1, g2 = cost.radial_grad(A, B, D)
            h11, h12, h22 = cost.radial_hess(A, B, D)
            GA = t * g1 - 1.0 / A
            GB = t * g2 - 1.0 / B
            K11 = t * h11 + 1.0 / (A * A)
            K22 = t * h22 + 1.0 / (B * B)
            K12 = t * h12
            # 1-homogeneity makes h11 h22 = h12^2, so the t^2 terms cancel
            # exactly; expanding avoids the catastrophic cancellation at large t
            det = t * h11 / (B * B) + t * h22 / (A * A) + 1.0 / (A * A * B * B)
            P = K22 / det
            Q = -K12 / det
            S = K11 / det
            D1 = P.sum(axis=1)
            D2 = S.sum(axis=0)
            r1 = -(P * GA + Q * GB).sum(axis=1)
            r2 = -(Q * GA + S * GB).sum(axis=0)
            Sch = np.diag(D2) - Q.T @ (Q / D1[:, None])
            rhs = r2 - Q.T @ (r1 / D1)
            try:
                # conditioning degrades near the end of the barrier path; the
                # polish step certifies the final point either way
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                    nu2 = scipy.linalg.solve(Sch, rhs, assume_a="pos", check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                nu2 = np.linalg.lstsq(Sch, rhs, rcond=None)[0]
            nu1 = (r1 - Q @ nu2) / D1
            EA = GA + nu1[:, None]
            EB = GB + nu2[None, :]
            dA = -(P * EA + Q * EB)
            dB = -(Q * EA + S * EB)
            # remove round-off from the marginal constraints, spread in proportion to the cells
            dA -= A * (dA.sum(axis=1) / A.sum(axis=1))[:, None]
            dB -= B * (dB.sum(axis=0) / B.sum(axis=0))[None, :]
            # on the constraint space G.d = E.d = -d'Kd; the multipliers grow like t,
            # so evaluating G.d directly amplifies any residual marginal error
            slope = float(np.sum(EA * dA + EB * dB))
            if -slope / 2.0 <= 1e-10:
                break
            smax = 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                ra = np.where(dA < 0, -A / dA, np.inf)
                rb = np.where(dB < 0, -B / dB, np.inf)
            smax = min(1.0, 0.99 * float(min(ra.min(), rb.min())))
            s = smax
            base = t * F - np.sum(np.log(A)) - np.sum(np.log(B))
            ok = False
            while s > 1e-14:
                An, Bn = A + s * dA, B + s * dB
                if np.all(An > 0) and np.all(Bn > 0):
                    Fn = F_of(An, Bn)
                    val = t * Fn - np.sum(np.log(An)) - np.sum(np.log(Bn))
                    if val <= base + 0.25 * s * slope:
                        ok = True
                        break
                s *= 0.5
            if not ok:
                break
            A = An * (a / An.sum(axis=1))[:, None]
            B = Bn * (b / Bn.sum(axis=0))[None, :]
            F = F_of(A, B)
        if N / t <= opts.gap_target * (1.0 + abs(F)):
            converged = True
            break
        if t > 1e16:
            message = "barrier parameter exhausted"
            converged = True
            break
        t *= mu
    if not converged:
        message = "iteration limit reached"
    phi1 = -nu1 / t
    phi2 = -nu2 / t
    return A, B, phi1, phi2, iters, converged, message


def _sparse_solve(J, rhs):
    """Solve J x = rhs by sparse LU, falling back to least squares when singular."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.sparse.linalg.MatrixRankWarning)
            x = scipy.sparse.linalg.splu(J).solve(rhs)
        if np.all(np.isfinite(x)):
            return x
    except (RuntimeError, scipy.sparse.linalg.MatrixRankWarning):
        pass
    x = scipy.sparse.linalg.lsqr(J, rhs, atol=1e-15, btol=1e-15, iter_lim=20 * J.shape[0])[0]
    return x if np.all(np.isfinite(x)) else None


def _kkt_polish(A, B, a, b, D, cost: CostFunction, phi1, phi2, active_tol=1e-9, max_iter=40):
    """Newton iteration on the optimality system restricted to the active cells.

    Cells with both entries above `active_tol` (relative to the marginals)
    keep both unknowns; cells with a single live entry keep only that one.
    The system is gradient == potential on every live entry plus the two
    marginal constraints.  Returns (A, B, phi1, phi2, residual) or None when
    the iteration fails to reduce the residual to round-off.
    """
    m, n = D.shape
    liveA = A > active_tol * a[:, None]
    liveB = B > active_tol * b[None, :]
    ia, ja = np.nonzero(liveA)
    ib, jb = np.nonzero(liveB)
    na, nb = len(ia), len(ib)
    size = na + nb + m + n
    if na + nb > 8 * (m + n) or na == 0 or nb == 0:
        return None
    posB = -np.ones((m, n), int)
    posB[ib, jb] = np.arange(nb)
    posA = -np.ones((m, n), int)
    posA[ia, ja] = np.arange(na)
    xa, xb = A[ia, ja].copy(), B[ib, jb].copy()
    p1, p2 = np.array(phi1, float), np.array(phi2, float)

    def unpack(xa, xb):
        Am = np.zeros((m, n))
        Bm = np.zeros((m, n))
        Am[ia, ja] = xa
        Bm[ib, jb] = xb
        return Am, Bm

    def residual(xa, xb, p1, p2):
        Am, Bm = unpack(xa, xb)
        with np.errstate(divide="ignore", invalid="ignore"):
            g1, g2 = cost.radial_grad(Am, Bm, D)
        ra = g1[ia, ja] - p1[ia]
        rb = g2[ib, jb] - p2[jb]
        rr = Am.sum(axis=1) - a
        rc = Bm.sum(axis=0) - b
        return np.concatenate([ra, rb, rr, rc]), Am, Bm

    F, Am, Bm = residual(xa, xb, p1, p2)
    if not np.all(np.isfinite(F)):
        return None
    norm = float(np.max(np.abs(F)))
    for _ in range(max_iter):
        if norm <= 1e-14:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            h11, h12, h22 = cost.radial_hess(Am, Bm, D)
        ra = np.arange(na)
        rb = na + np.arange(nb)
        kb = posB[ia, ja]
        ka = posA[ib, jb]
        sa, sb = kb >= 0, ka >= 0
        rows = np.concatenate([ra, ra[sa], ra, rb, rb[sb], rb, na + nb + ia, na + nb + m + jb])
        cols = np.concatenate([ra, na + kb[sa], na + nb + ia, rb, ka[sb], na + nb + m + jb, ra, rb])
        vals = np.concatenate([
            np.where(liveB[ia, ja], h11[ia, ja], 0.0),   # d g1 / d A
            h12[ia, ja][sa],                             # d g1 / d B
            -np.ones(na),
            np.where(liveA[ib, jb], h22[ib, jb], 0.0),   # d g2 / d B
            h12[ib, jb][sb],                             # d g2 / d A
            -np.ones(nb),
            np.ones(na), np.ones(nb),                    # marginals
        ])
        if not np.all(np.isfinite(vals)):
            return None
        J = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(size, size))
        step = _sparse_solve(J, -F)
        if step is None:
            return None
        da, db = step[:na], step[na:na + nb]
        dp1, dp2 = step[na + nb:na + nb + m], step[na + nb + m:]
        s = 1.0
        improved = False
        while s > 1e-6:
            xa_n, xb_n = xa + s * da, xb + s * db
            if np.all(xa_n > 0) and np.all(xb_n > 0):
                Fn, Am_n, Bm_n = residual(xa_n, xb_n, p1 + s * dp1, p2 + s * dp2)
                nn = float(np.max(np.abs(Fn)))
                if np.all(np.isfinite(Fn)) and nn < norm:
                    improved = True
                    break
            s *= 0.5
        if not improved:
            break
        xa, xb, p1, p2 = xa_n, xb_n, p1 + s * dp1, p2 + s * dp2
        F, Am, Bm, norm = Fn, Am_n, Bm_n, nn
    if norm > 1e-11:
        return None
    return Am, Bm, p1, p2, norm


def _dual_infeasibility(D, cost: CostFunction, phi1, phi2) -> float:
    m, n = D.shape
    with np.errstate(invalid="ignore"):
        slack = cost.conj(np.broadcast_to(phi2[None, :], (m, n)), D, side=1) - phi1[:, None]
    slack = np.where(np.isnan(slack), -INF, slack)
    return float(max(0.0, -np.min(slack)))


def _polish(A, B, a, b, D, cost: CostFunction, phi1, phi2):
    """Refine a barrier solution by Newton on the active set.

    The active set is ambiguous for entries near the barrier floor, so a few
    thresholds are tried.  A refinement is kept only when its cost is no
    worse; the returned flag is True when its potentials are also dual
    feasible, which certifies optimality.
    """
    base = _cell_sum(cost, A, B, D)
    best = None
    for tol in (1e-9, 1e-7, 1e-11, 1e-5):
        out = _kkt_polish(A, B, a, b, D, cost, phi1, phi2, active_tol=tol)
        if out is None:
            continue
        Ap, Bp, p1, p2, _ = out
        Ap, Bp = _exact_marginals(Ap, Bp, a, b, 0.0)
        val = _cell_sum(cost, Ap, Bp, D)
        if val > base + 1e-15 * (1 + abs(base)):
            continue
        infeas = _dual_infeasibility(D, cost, p1, p2)
        if infeas <= 1e-11:
            return Ap, Bp, p1, p2, True
        if best is None or infeas < best[0]:
            best = (infeas, Ap, Bp, p1, p2)
    if best is not None and best[0] < _dual_infeasibility(D, cost, np.asarray(phi1), np.asarray(phi2)):
        return best[1:] + (False,)
    return A, B, phi1, phi2, False


# --------------------------------------------------------------------------
# ray LP: decompose each cell along rays of the lower convex hull of H

def _ray_lp(a, b, D, cost: CostFunction, opts: SolveOptions):
    m, n = D.shape
    cols_cell, cols_t, cols_f = [], [], []
    profiles: dict[float, tuple] = {}
    for i in range(m):
        for j in range(n):
            key = round(float(D[i, j]), 12)
            if key not in profiles:
                profiles[key] = _envelope_profile(cost, key, opts.lp_rays)
            ht, hf = profiles[key]
            cols_cell.append(np.full(len(ht), i * n + j))
            cols_t.append(ht)
            cols_f.append(hf)
    cell = np.concatenate(cols_cell)
    tt = np.concatenate(cols_t)
    ff = np.concatenate(cols_f)
    nv = len(cell)
    rows_i = cell // n
    cols_j = cell % n
    import scipy.sparse as sp
    Aeq = sp.vstack([
        sp.csr_matrix(((1.0 - tt), (rows_i, np.arange(nv))), shape=(m, nv)),
        sp.csr_matrix((tt, (cols_j, np.arange(nv))), shape=(n, nv)),
    ]).tocsr()
    beq = np.concatenate([a, b])
    res = linprog(ff, A_eq=Aeq, b_eq=beq, bounds=(0, None), method="highs")
    if res.status != 0:
        return None
    lam = res.x
    A = np.zeros(m * n)
    B = np.zeros(m * n)
    np.add.at(A, cell, lam * (1.0 - tt))
    np.add.at(B, cell, lam * tt)
    phi = res.eqlin.marginals
    return A.reshape(m, n), B.reshape(m, n), phi[:m], phi[m:]


# --------------------------------------------------------------------------
# accelerated projected gradient

def _apg(a, b, D, cost: CostFunction, opts: SolveOptions, A0=None, B0=None):
    m, n = D.shape
    A = np.outer(a, np.ones(n)) / n if A0 is None else A0.copy()
    B = np.outer(np.ones(m), b) / m if B0 is None else B0.copy()
    eps = 1e-14

    def f(A, B):
        v = cost.radial(A, B, D)
        return float(np.sum(v))

    def grad(A, B):
        g1, g2 = cost.radial_grad(np.maximum(A, eps), np.maximum(B, eps), D)
        return np.nan_to_num(g1, posinf=1e12, neginf=-1e12), np.nan_to_num(g2, posinf=1e12, neginf=-1e12)

    fx = f(A, B)
    best = (fx, A, B)
    L = 1.0
    YA, YB = A.copy(), B.copy()
    tk = 1.0
    iters = 0
    converged = False
    stall = 0
    while iters < opts.max_iter:
        iters += 1
        fy = f(YA, YB)
        gA, gB = grad(YA, YB)
        while True:
            NA, NB = project_semicoupling(YA - gA / L, YB - gB / L, a, b)
            fn = f(NA, NB)
            dA, dB = NA - YA, NB - YB
            quad = fy + np.sum(gA * dA + gB * dB) + 0.5 * L * (np.sum(dA * dA) + np.sum(dB * dB))
            if np.isfinite(fn) and fn <= quad + 1e-15 * abs(fy):
                break
            L *= 2.0
            if L > 1e16:
                break
        step = math.sqrt(np.sum(dA * dA) + np.sum(dB * dB))
        if fn > fx:  # function-value restart
            tk = 1.0
            YA, YB = A.copy(), B.copy()
            stall += 1
            if stall > 50:
                break
            continue
        tn = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        beta = (tk - 1) / tn
        YA = NA + beta * (NA - A)
        YB = NB + beta * (NB - B)
        improvement = fx - fn
        A, B, fx, tk = NA, NB, fn, tn
        if fx < best[0]:
            best = (fx, A, B)
        L = max(L / 1.5, 1e-8)
        if step * L < opts.tol * 1e-3 * (1 + abs(fx)) or improvement < 1e-16 * (1 + abs(fx)):
            stall += 1
            if stall > 20:
                converged = True
                break
        else:
            stall = 0
    fx, A, B = best
    # multiplier estimates: weighted means of the partial derivatives
    g1, g2 = grad(A, B)
    phi1 = np.sum(g1 * A, axis=1) / np.maximum(a, 1e-300)
    phi2 = np.sum(g2 * B, axis=0) / np.maximum(b, 1e-300)
    return A, B, phi1, phi2, iters, converged


# --------------------------------------------------------------------------

def _choose_method(cost: CostFunction, opts: SolveOptions) -> str:
    if opts.method != "auto":
        return opts.method
    if cost.hess is not None and cost.grad is not None and cost.finite_everywhere:
        return "newton"
    return "lp"


def _matched_support(inst: Instance):
    """Permutation matching identical supports, or None."""
    m, n = inst.shape
    if m != n or m == 0:
        return None
    idx = inst.mu2.index_of(inst.mu1.positions)
    if np.any(idx < 0) or len(set(idx.tolist())) != m:
        return None
    return idx


def multiplier_residual(inst: Instance, phi1, phi2, value: float) -> float:
    """max(dual infeasibility, relative complementarity gap) of multipliers."""
    m, n = inst.shape
    if m == 0 or n == 0:
        return 0.0
    slack = inst.cost.conj(np.broadcast_to(phi2[None, :], (m, n)), inst.D, side=1) - phi1[:, None]
    infeas = float(max(0.0, -np.min(slack)))
    dual = float(phi1 @ inst.mu1.masses + phi2 @ inst.mu2.masses)
    return max(infeas, abs(value - dual) / (1.0 + abs(value)))


def solve_semicoupling(inst: Instance, opts: SolveOptions | None = None) -> SolveReport:
    """Minimise the semi-coupling cost for a discrete instance."""
    opts = opts or SolveOptions()
    if opts.max_iter < 1:
        raise ValueError("max_iter must be positive")
    t0 = time.perf_counter()
    cost = inst.cost
    fingerprint = inst.fingerprint
    substituted = False
    if not cost.radially_convex:
        cost = envelope_cost(cost, opts.envelope_resolution)
        inst = inst.with_cost(cost)
        substituted = True
    m, n = inst.shape
    a_full = np.asarray(inst.mu1.masses, float)
    b_full = np.asarray(inst.mu2.masses, float)

    if m == 0 or n == 0:
        sc = SemiCoupling(np.zeros((m, n)), np.zeros((m, n)), a_full.copy(), b_full.copy())
        val = sc.value(inst)
        phi1 = np.asarray(cost.destruction(np.zeros(m)), float) * np.ones(m)
        phi2 = np.asarray(cost.recession(np.zeros(n)), float) * np.ones(n)
        return SolveReport(val, sc, 0, 0.0, time.perf_counter() - t0, True, "closed",
                           substituted, phi1, phi2, "null measure", fingerprint)

    scale = max(a_full.sum(), b_full.sum())
    a, b = a_full / scale, b_full / scale
    D = inst.D
    method = _choose_method(cost, opts)
    message = ""
    if m == 1 and n == 1:
        A, B = a.reshape(1, 1), b.reshape(1, 1)
        g1, g2 = cost.radial_grad(A, B, D)
        phi1, phi2 = np.ravel(g1), np.ravel(g2)
        iters, converged, method = 0, True, "closed"
    elif method == "newton":
        A, B, phi1, phi2, iters, converged, message = _ipm(a, b, D, cost, opts)
    elif method in ("lp", "apg"):
        A0 = B0 = None
        phi1 = phi2 = None
        if method == "lp":
            lp = _ray_lp(a, b, D, cost, opts)
            if lp is not None:
                A0, B0, phi1, phi2 = lp
        A, B, p1, p2, iters, converged = _apg(a, b, D, cost, opts, A0, B0)
        if phi1 is None:
            phi1, phi2 = p1, p2
        elif A0 is not None and _cell_sum(cost, A0, B0, D) <= _cell_sum(cost, A, B, D):
            A, B = A0, B0
            converged = True
    else:
        raise ValueError(f"unknown method {method!r}")

    A, B = _exact_marginals(np.array(A), np.array(B), a, b, opts.zero_threshold)
    if method in ("newton", "lp", "apg"):
        A, B, phi1, phi2, certified = _polish(A, B, a, b, D, cost, phi1, phi2)
        converged = converged or certified
    perm = _matched_support(inst)
    if perm is not None:
        Ad = np.zeros((m, n))
        Bd = np.zeros((m, n))
        Ad[np.arange(m), perm] = a
        Bd[np.arange(m), perm] = b[perm]
        if _cell_sum(cost, Ad, Bd, D) <= _cell_sum(cost, A, B, D):
            A, B = Ad, Bd
    sc = SemiCoupling.from_matrices(A * scale, B * scale)
    value = sc.value(inst)
    phi1 = np.asarray(phi1, float)
    phi2 = np.asarray(phi2, float)
    kkt = multiplier_residual(inst, phi1, phi2, value)
    if not converged and not message:
        message = "iteration limit reached"
    return SolveReport(value, sc, iters, kkt, time.perf_counter() - t0, converged, method,
                       substituted, phi1, phi2, message, fingerprint)


def uot_value(mu1: DiscreteMeasure, mu2: DiscreteMeasure, cost: CostFunction,
              opts: SolveOptions | None = None) -> float:
    """Optimal unbalanced transport cost between two discrete measures."""
    return solve_semicoupling(Instance(mu1, mu2, cost), opts).value


# --------------------------------------------------------------------------
# brute force oracle for tiny instances

def _lattice(G):
    return np.linspace(0.0, 1.0, G)


def _refine_1d(f, x, lo, hi, iters=60):
    """Golden-section refinement of a scalar variable inside [lo, hi]."""
    gr = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = f(d)
    best = min([(f(x), x), (fc, c), (fd, d)])
    return best[1]


def _simplex_split_min(cost, radius, partners, dists, side, G):
    """min over splits of `radius` into len(partners) cells on a lattice.

    Dynamic programming over cells on the lattice radius * k / (G - 1); the
    cell cost is H(split, partner) (side 1) or H(partner, split) (side 2).
    Returns (value, split).
    """
    k = len(partners)
    grid = radius * _lattice(G)
    if k == 1:
        split = np.array([radius])
        r1, r2 = (split, partners) if side == 1 else (partners, split)
        return float(np.sum(cost.radial(r1, r2, dists))), split
    tables = []
    for c in range(k):
        r = grid
        v = cost.radial(r, partners[c], dists[c]) if side == 1 else cost.radial(partners[c], r, dists[c])
        tables.append(np.asarray(v, float))
    # best[s] = min cost of first c cells using s lattice units
    best = tables[0].copy()
    choice = []
    for c in range(1, k):
        # new[s] = min_u best[s - u] + tables[c][u]
        idx = np.arange(G)
        S = idx[:, None] - idx[None, :]  # s - u
        valid = S >= 0
        cand = np.where(valid, best[np.clip(S, 0, G - 1)] + tables[c][None, :], np.inf)
        u = np.argmin(cand, axis=1)
        choice.append(u)
        best = cand[idx, u]
    # total must use all G-1 units
    s = G - 1
    units = np.zeros(k, int)
    for c in range(k - 1, 0, -1):
        u = choice[c - 1][s]
        units[c] = u
        s -= u
    units[0] = s
    split = radius * units / (G - 1)
    return float(best[G - 1]), split


def brute_force_value(inst: Instance, grid: int = 1024) -> float:
    """Grid-search upper bound for instances with at most 4 free scalars.

    The semi-coupling polytope is parametrised by the row splits of A and
    the column splits of B; the lattice minimum is exact (dynamic
    programming over the splits) and followed by one pass of coordinate
    refinement.  Independent of the iterative solvers.
    """
    if grid < 2:
        raise ValueError("grid must be at least 2")
    m, n = inst.shape
    free = 2 * m * n - m - n if m and n else 0
    if free > 4:
        raise ValueError(f"instance has {free} free scalars; brute force supports at most 4")
    cost = inst.cost
    a, b = inst.mu1.masses, inst.mu2.masses
    D = inst.D
    if m == 0 or n == 0:
        return SemiCoupling(np.zeros((m, n)), np.zeros((m, n)), a.copy(), b.copy()).value(inst)
    if m == 1:
        # A row free on the simplex, B forced to b
        val, split = _simplex_split_min(cost, a[0], b, D[0], 1, grid)
        A = split.reshape(1, n)
        B = b.reshape(1, n)
        A = _coordinate_pass(cost, A, B, D, rows=True)
        return _cell_sum(cost, A, B, D)
    if n == 1:
        val, split = _simplex_split_min(cost, b[0], a, D[:, 0], 2, grid)
        B = split.reshape(m, 1)
        A = a.reshape(m, 1)
        B = _coordinate_pass(cost, A, B, D, rows=False)
        return _cell_sum(cost, A, B, D)
    # m = n = 2: variables t1, t2 (row splits of A) and s1, s2 (column splits of B)
    g = _lattice(grid)

    def H(r1, r2, d):
        return np.asarray(cost.radial(r1, r2, d), float)

    a1, a2 = a
    b1, b2 = b
    M11 = H(a1 * g[:, None], b1 * g[None, :], D[0, 0])           # [t1, s1]
    M12 = H(a1 * (1 - g)[:, None], b2 * g[None, :], D[0, 1])     # [t1, s2]
    M21 = H(a2 * g[:, None], b1 * (1 - g)[None, :], D[1, 0])     # [t2, s1]
    M22 = H(a2 * (1 - g)[:, None], b2 * (1 - g)[None, :], D[1, 1])  # [t2, s2]
    Nmat = _minplus(M22, M12.T)        # N[t2, t1] = min_s2 M22[t2, s2] + M12[t1, s2]
    Pmat = _minplus(M21.T, Nmat)       # P[s1, t1] = min_t2 M21[t2, s1] + N[t2, t1]
    total = M11 + Pmat.T               # [t1, s1]
    i1, j1 = np.unravel_index(np.argmin(total), total.shape)
    k2 = int(np.argmin(M21[:, j1] + Nmat[:, i1]))
    l2 = int(np.argmin(M22[k2, :] + M12[i1, :]))
    t1, s1, t2, s2 = g[i1], g[j1], g[k2], g[l2]
    x = np.array([t1, t2, s1, s2])

    def objective(x):
        t1, t2, s1, s2 = x
        A = np.array([[a1 * t1, a1 * (1 - t1)], [a2 * t2, a2 * (1 - t2)]])
        B = np.array([[b1 * s1, b2 * s2], [b1 * (1 - s1), b2 * (1 - s2)]])
        return _cell_sum(cost, A, B, D)

    h = 1.0 / (grid - 1)
    for k in range(4):
        def fk(v, k=k):
            y = x.copy()
            y[k] = v
            return objective(y)
        x[k] = _refine_1d(fk, x[k], max(0.0, x[k] - h), min(1.0, x[k] + h))
    return min(objective(x), float(total[i1, j1]))


def _minplus(X, Y, chunk=32):
    """Min-plus product: out[i, k] = min_j X[i, j] + Y[j, k]."""
    out = np.empty((X.shape[0], Y.shape[1]))
    for s in range(0, X.shape[0], chunk):
        blk = X[s:s + chunk, :, None] + Y[None, :, :]
        out[s:s + chunk] = blk.min(axis=1)
    return out


def _coordinate_pass(cost, A, B, D, rows: bool):
    """One pass of pairwise mass moves between cells of the free simplex."""
    A = A.copy()
    B = B.copy()
    X = A if rows else B
    k = X.shape[1] if rows else X.shape[0]
    for c in range(1, k):
        def objective(v, c=c):
            Y = X.copy()
            if rows:
                tot = Y[0, 0] + Y[0, c]
                Y[0, 0], Y[0, c] = tot - v, v
                return _cell_sum(cost, Y, B, D)
            tot = Y[0, 0] + Y[c, 0]
            Y[0, 0], Y[c, 0] = tot - v, v
            return _cell_sum(cost, A, Y, D)
        cur = X[0, c] if rows else X[c, 0]
        tot = (X[0, 0] + X[0, c]) if rows else (X[0, 0] + X[c, 0])
        v = _refine_1d(objective, cur, 0.0, tot)
        if objective(v) <= objective(cur):
            if rows:
                X[0, 0], X[0, c] = tot - v, v
            else:
                X[0, 0], X[c, 0] = tot - v, v
    return X


# --------------------------------------------------------------------------
# coupling conversions

def to_homogeneous_coupling(sc: SemiCoupling, inst: Instance) -> HomogeneousCoupling:
    """Atoms ([x_i, A_ij], [y_j, B_ij]) with unit weight; vertex columns included."""
    m, n = inst.shape
    X, Y = inst.mu1.positions, inst.mu2.positions
    d = inst.space.dim
    I, J = np.nonzero((sc.A > 0) | (sc.B > 0))
    x1 = [X[I]]
    x2 = [Y[J]]
    r1 = [sc.A[I, J]]
    r2 = [sc.B[I, J]]
    di = np.flatnonzero(sc.destroyed > 0)
    cj = np.flatnonzero(sc.created > 0)
    x1 += [X[di], np.full((len(cj), d), np.nan)]
    x2 += [np.full((len(di), d), np.nan), Y[cj]]
    r1 += [sc.destroyed[di], np.zeros(len(cj))]
    r2 += [np.zeros(len(di)), sc.created[cj]]
    x1 = np.vstack(x1).reshape(-1, d)
    x2 = np.vstack(x2).reshape(-1, d)
    r1 = np.concatenate(r1)
    r2 = np.concatenate(r2)
    return HomogeneousCoupling(x1, r1, x2, r2, np.ones(len(r1)), 1.0)


@dataclass(frozen=True)
class Decomposition:
    """mu_i = mu_i' + mu_i'' with mu_i'' the purely destroyed/created parts."""

    mu1_t: DiscreteMeasure
    mu1_s: DiscreteMeasure
    mu2_t: DiscreteMeasure
    mu2_s: DiscreteMeasure
    S1_t: np.ndarray
    S1_s: np.ndarray
    S2_t: np.ndarray
    S2_s: np.ndarray
    mixed1: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    mixed2: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def to_json(self) -> dict:
        return {
            "mu1_transported": self.mu1_t.to_json(),
            "mu1_destroyed": self.mu1_s.to_json(),
            "mu2_transported": self.mu2_t.to_json(),
            "mu2_created": self.mu2_s.to_json(),
        }


def distinguished_decomposition(alpha: HomogeneousCoupling, inst: Instance | None = None,
                                space: Space | None = None) -> Decomposition:
    """Split marginals into transported parts and purely destroyed/created parts.

    Atoms ([x, r], vertex) feed mu1'' and atoms (vertex, [y, s]) feed mu2'';
    everything else feeds the transported parts.  Positions carrying both
    kinds of mass are reported in `mixed1` / `mixed2`.
    """
    if alpha.p != 1.0:
        raise ValueError("decomposition expects a 1-homogeneous coupling")
    space = space or (inst.space if inst is not None else Space(alpha.dims[0]))
    dest = alpha.r2 == 0
    crea = alpha.r1 == 0
    tran = ~dest & ~crea

    def part(mask, side):
        return homogeneous_marginal(alpha.replace(w=np.where(mask, alpha.w, 0.0)), side, space)

    mu1_t, mu1_s = part(tran, 1), part(dest, 1)
    mu2_t, mu2_s = part(tran, 2), part(crea, 2)
    mixed1 = mu1_s.positions[mu1_t.index_of(mu1_s.positions) >= 0] if len(mu1_s) and len(mu1_t) else np.zeros((0, space.dim))
    mixed2 = mu2_s.positions[mu2_t.index_of(mu2_s.positions) >= 0] if len(mu2_s) and len(mu2_t) else np.zeros((0, space.dim))
    S1_s = mu1_s.positions[mu1_t.index_of(mu1_s.positions) < 0] if len(mu1_s) else np.zeros((0, space.dim))
    S2_s = mu2_s.positions[mu2_t.index_of(mu2_s.positions) < 0] if len(mu2_s) else np.zeros((0, space.dim))
    dec = Decomposition(mu1_t, mu1_s, mu2_t, mu2_s, mu1_t.positions, S1_s, mu2_t.positions, S2_s,
                        mixed1, mixed2)
    if inst is not None:
        for mt, ms, mu in ((mu1_t, mu1_s, inst.mu1), (mu2_t, mu2_s, inst.mu2)):
            _check_recomposition(mt, ms, mu)
    return dec


def _check_recomposition(mt: DiscreteMeasure, ms: DiscreteMeasure, mu: DiscreteMeasure, tol=1e-12):
    total = np.zeros(len(mu))
    for part in (mt, ms):
        if len(part):
            idx = mu.index_of(part.positions)
            if np.any(idx < 0):
                raise ArithmeticError("decomposition charges points outside the support")
            np.add.at(total, idx, part.masses)
    if len(mu) and np.max(np.abs(total - mu.masses) / mu.masses) > 1e-10:
        raise ArithmeticError("decomposition does not recompose the marginal")
