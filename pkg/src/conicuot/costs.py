"""Cost functions on the product cone.

Every cost is stored through its radial profile H(r1, r2; d): a function of
the two radii and of the ground distance d = d(x1, x2).  It is radially
1-homogeneous and vectorised over numpy arrays; +inf is a legal value.
The vertex is evaluated at d = 0, which is the lower semicontinuous choice
for costs whose ground cost increases with the distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cone import ConePoint, Space

HALF_PI = math.pi / 2
INF = math.inf
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# --------------------------------------------------------------------------
# ground costs c = c(d)

def _ground_zero(d):
    return np.zeros_like(np.asarray(d, float))


def _ground_distance(d):
    return np.asarray(d, float)


def _ground_sqdistance(d):
    d = np.asarray(d, float)
    return d * d


def _ground_hk(d):
    d = np.asarray(d, float)
    with np.errstate(divide="ignore"):
        c = -2.0 * np.log(np.cos(np.minimum(d, HALF_PI)))
    return np.where(d < HALF_PI, c, INF)


GROUNDS: dict[str, Callable] = {
    "zero": _ground_zero,
    "distance": _ground_distance,
    "sqdistance": _ground_sqdistance,
    "hk": _ground_hk,
}


def _arr(*vals):
    return np.broadcast_arrays(*(np.asarray(v, float) for v in vals))


# --------------------------------------------------------------------------
# entropy functions for perspective costs

@dataclass(frozen=True)
class EntropySpec:
    """Convex entropy F on [0, inf).

    kind = "power": U_p;  kind = "indicator": I_[a, b];  kind = "chi": |s - 1|^alpha.
    """

    kind: str
    p: float = 1.0
    a: float = 0.0
    b: float = INF
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("power", "indicator", "chi"):
            raise ValueError(f"unknown entropy kind {self.kind!r}")
        if self.kind == "indicator" and not (0 <= self.a <= 1 <= self.b):
            raise ValueError("indicator interval needs 0 <= a <= 1 <= b")
        if self.kind == "chi" and self.alpha < 1:
            raise ValueError("chi entropy needs alpha >= 1")

    @classmethod
    def power(cls, p: float) -> "EntropySpec":
        return cls("power", p=float(p))

    @classmethod
    def indicator(cls, a: float, b: float) -> "EntropySpec":
        return cls("indicator", a=float(a), b=float(b))

    @classmethod
    def chi(cls, alpha: float = 1.0) -> "EntropySpec":
        return cls("chi", alpha=float(alpha))

    def __call__(self, s):
        s = np.asarray(s, float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.kind == "power":
                p = self.p
                if p == 1.0:
                    out = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)) - s + 1.0, 1.0)
                elif p == 0.0:
                    out = np.where(s > 0, s - 1.0 - np.log(np.where(s > 0, s, 1.0)), INF)
                else:
                    sp = np.where(s > 0, s ** p, 0.0 if p > 0 else INF)
                    out = (sp - p * (s - 1.0) - 1.0) / (p * (p - 1.0))
            elif self.kind == "indicator":
                out = np.where((s >= self.a) & (s <= self.b), 0.0, INF)
            else:
                out = np.abs(s - 1.0) ** self.alpha
        return out

    @property
    def at_zero(self) -> float:
        return float(self(0.0))

    @property
    def recession(self) -> float:
        """lim F(s)/s as s -> inf."""
        if self.kind == "power":
            return INF if self.p >= 1 else 1.0 / (1.0 - self.p)
        if self.kind == "indicator":
            return 0.0 if self.b == INF else INF
        return 1.0 if self.alpha == 1 else INF

    def to_json(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "p": self.p}
        if self.kind == "indicator":
            return {"kind": "indicator", "a": self.a, "b": _num_json(self.b)}
        return {"kind": "chi", "alpha": self.alpha}

    @classmethod
    def from_json(cls, obj: dict) -> "EntropySpec":
        kind = obj.get("kind")
        if kind == "power":
            return cls.power(obj["p"])
        if kind == "indicator":
            return cls.indicator(obj["a"], _num_from_json(obj["b"]))
        if kind == "chi":
            return cls.chi(obj.get("alpha", 1.0))
        raise ValueError(f"unknown entropy kind {kind!r}")


def _num_json(v):
    if v == INF:
        return "inf"
    if v == -INF:
        return "-inf"
    return v


def _num_from_json(v):
    if isinstance(v, str):
        low = v.strip().lower()
        if low in ("inf", "+inf", "infinity"):
            return INF
        if low in ("-inf", "-infinity"):
            return -INF
        if low in ("pi", "π"):
            return math.pi
        if low in ("pi/2", "π/2"):
            return HALF_PI
    return float(v)


# --------------------------------------------------------------------------
# the cost container

@dataclass(frozen=True)
class CostFunction:
    """Radially 1-homogeneous cost on the product cone.

    radial(r1, r2, d) is the profile; grad/hess give radial derivatives in
    the open quadrant, dx_factor(r1, r2, d) * (x1 - x2) is the partial
    derivative in x1, and conj(b, d, side) evaluates
    inf_{g >= 0} H(1, g) - b g (side 1) or inf_{g >= 0} H(g, 1) - b g (side 2).
    domain = (q1, q2) means H is finite only when r2 >= q1 r1 and r1 >= q2 r2.
    """

    name: str
    spec: dict
    radial: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    dx_factor: Optional[Callable] = None
    conj_closed: Optional[Callable] = None
    domain: Optional[tuple] = None
    radially_convex: bool = True
    finite_everywhere: bool = True
    metric_power: Optional[float] = None
    partial_inverse: Optional[Callable] = None
    meta: dict = field(default_factory=dict, compare=False)

    # ---- evaluation -------------------------------------------------------
    def __call__(self, r1, r2, d):
        return self.radial(r1, r2, d)

    def eval(self, y1: ConePoint, y2: ConePoint, space: Space | None = None) -> float:
        if y1.is_vertex and y2.is_vertex:
            return 0.0
        if y1.is_vertex or y2.is_vertex:
            d = 0.0
        else:
            space = space or Space(len(y1.x))
            d = space.distances([y1.x], [y2.x])[0, 0]
        return float(self.radial(y1.r, y2.r, d))

    def eval_arrays(self, x1, r1, x2, r2, space: Space) -> np.ndarray:
        """Row-wise H([x1_k, r1_k], [x2_k, r2_k]); NaN positions mean vertex."""
        d = rowwise_distance(x1, x2, space)
        return np.asarray(self.radial(r1, r2, d), float)

    def ground_matrix(self, X, Y, space: Space) -> np.ndarray:
        return space.distances(X, Y)

    def recession(self, d):
        """H(0, 1; d), the creation slope."""
        return self.radial(0.0, 1.0, d)

    def destruction(self, d):
        """H(1, 0; d), the destruction slope."""
        return self.radial(1.0, 0.0, d)

    # ---- derivatives --------------------------------------------------------
    def radial_grad(self, r1, r2, d):
        if self.grad is not None:
            return self.grad(r1, r2, d)
        return _fd_grad(self.radial, r1, r2, d)

    def radial_hess(self, r1, r2, d):
        if self.hess is not None:
            return self.hess(r1, r2, d)
        return _fd_hess(self, r1, r2, d)

    def conj(self, b, d, side: int = 1):
        """inf over g >= 0 of H(1, g) - b g (side 1) or H(g, 1) - b g (side 2)."""
        b, d = _arr(b, d)
        if self.conj_closed is not None:
            return self.conj_closed(b, d, side)
        return _conj_numeric(self, b, d, side)

    def to_spec(self) -> dict:
        return dict(self.spec)

    def __repr__(self):
        return f"CostFunction({self.name})"


def rowwise_distance(x1, x2, space: Space) -> np.ndarray:
    x1 = np.asarray(x1, float).reshape(len(x1), -1)
    x2 = np.asarray(x2, float).reshape(len(x2), -1)
    vert = np.any(np.isnan(x1), axis=1) | np.any(np.isnan(x2), axis=1)
    if space.matrix is not None:
        i = np.where(vert, 0, np.nan_to_num(x1[:, 0])).astype(int)
        j = np.where(vert, 0, np.nan_to_num(x2[:, 0])).astype(int)
        d = space.matrix[i, j]
    else:
        diff = np.nan_to_num(x1 - x2)
        d = np.sqrt(np.sum(diff * diff, axis=1))
    return np.where(vert, 0.0, d)


# --------------------------------------------------------------------------
# numerical helpers

def _fd_grad(radial, r1, r2, d, rel=1e-6):
    r1, r2, d = _arr(r1, r2, d)
    s = r1 + r2
    h = rel * np.where(s > 0, s, 1.0)
    a1 = np.maximum(r1, h)
    a2 = np.maximum(r2, h)
    g1 = (radial(a1 + h, r2, d) - radial(a1 - h, r2, d)) / (2 * h)
    g2 = (radial(r1, a2 + h, d) - radial(r1, a2 - h, d)) / (2 * h)
    return g1, g2


def _fd_hess(cost, r1, r2, d, rel=1e-5):
    r1, r2, d = _arr(r1, r2, d)
    h1 = rel * np.maximum(r1, 1e-300)
    h2 = rel * np.maximum(r2, 1e-300)
    gp = cost.radial_grad(r1 + h1, r2, d)
    gm = cost.radial_grad(r1 - h1, r2, d)
    h11 = (gp[0] - gm[0]) / (2 * h1)
    h12a = (gp[1] - gm[1]) / (2 * h1)
    gp = cost.radial_grad(r1, r2 + h2, d)
    gm = cost.radial_grad(r1, r2 - h2, d)
    h22 = (gp[1] - gm[1]) / (2 * h2)
    h12b = (gp[0] - gm[0]) / (2 * h2)
    return h11, 0.5 * (h12a + h12b), h22


def golden_min(f, lo, hi, iters: int = 100):
    """Vectorised golden-section search of a unimodal f on [lo, hi].

    Returns (argmin, min) including the two endpoints as candidates.
    """
    lo = np.array(lo, float, copy=True)
    hi = np.array(hi, float, copy=True)
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1 = f(x1)
    f2 = f(x2)
    for _ in range(iters):
        left = f1 <= f2  # minimum lies in [lo, x2]
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        xn = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
        fn = f(xn)
        x1, x2 = np.where(left, xn, x2), np.where(left, x1, xn)
        f1, f2 = np.where(left, fn, f2), np.where(left, f1, fn)
    xm = 0.5 * (lo + hi)
    cands = [(xm, f(xm)), (lo, f(lo)), (hi, f(hi))]
    best_x, best_f = cands[0]
    for x, v in cands[1:]:
        better = v < best_f
        best_x = np.where(better, x, best_x)
        best_f = np.where(better, v, best_f)
    return best_x, best_f


def _conj_numeric(cost: CostFunction, b, d, side: int):
    b, d = _arr(b, d)
    shape = b.shape
    b = b.ravel()
    d = d.ravel()

    def phi(g):
        return cost.radial(1.0, g, d) if side == 1 else cost.radial(g, 1.0, d)

    slope = np.asarray(cost.recession(d) if side == 1 else cost.destruction(d), float) * np.ones_like(b)
    lo = np.zeros_like(b)
    hi_cap = np.full_like(b, INF)
    if cost.domain is not None:
        q1, q2 = cost.domain
        qa, qb = (q1, q2) if side == 1 else (q2, q1)
        lo[:] = qa * (1 + 1e-12)
        if qb > 0:
            hi_cap[:] = (1.0 / qb) * (1 - 1e-12)

    def obj(g):
        with np.errstate(invalid="ignore"):
            v = phi(g) - b * g
        return np.where(np.isnan(v), INF, v)

    # b = -inf: only g = 0 counts
    out = np.empty_like(b)
    neg = np.isneginf(b)
    out[neg] = np.asarray(phi(np.zeros(1)) * np.ones_like(b))[neg]
    unb = (b > slope * (1 + 1e-14) + 1e-300) & ~neg
    hi = np.minimum(np.maximum(lo * 2, 1.0), hi_cap)
    for _ in range(80):
        grow = (obj(2 * hi) < obj(hi)) & (2 * hi <= hi_cap)
        if not np.any(grow):
            break
        hi = np.where(grow, 2 * hi, hi)
    hi = np.minimum(2 * hi, hi_cap)
    # coarse scan keeps golden search robust when the objective is +inf on part of the bracket
    grid = lo[None, :] + (hi - lo)[None, :] * np.linspace(0, 1, 65)[:, None] ** 2
    vals = np.stack([obj(g) for g in grid])
    k = np.argmin(vals, axis=0)
    a = grid[np.maximum(k - 1, 0), np.arange(len(b))]
    c = grid[np.minimum(k + 1, 64), np.arange(len(b))]
    _, fv = golden_min(obj, a, c, iters=80)
    fv = np.minimum(fv, vals.min(axis=0))
    res = np.where(unb, -INF, fv)
    res = np.where(neg, out, res)
    return res.reshape(shape)


def _is_radially_convex(radial, d_samples, n: int = 401, tol: float = 1e-9) -> bool:
    """Midpoint convexity of t -> H(1 - t, t; d) on the unit segment."""
    t = np.linspace(0.0, 1.0, n)
    for d in d_samples:
        f = np.asarray(radial(1.0 - t, t, d), float)
        fin = np.isfinite(f)
        if not np.all(fin):
            idx = np.flatnonzero(fin)
            if len(idx) == 0:
                continue
            if np.any(~fin[idx[0]: idx[-1] + 1]):
                return False
            f = f[idx[0]: idx[-1] + 1]
        if len(f) < 3:
            continue
        second = f[:-2] - 2 * f[1:-1] + f[2:]
        if np.any(second < -tol * (1 + np.abs(f[1:-1]))):
            return False
    return True


_PROBE_D = (0.0, 0.05, 0.3, 0.8, 1.2, 1.5, 1.6, 2.0, 2.5, 3.0, 3.2, 4.0, 6.0)


# --------------------------------------------------------------------------
# the family H = r1 + r2 - 2 k(d) sqrt(r1 r2)

def _root_family(name, spec, kfun, kprime_over_d, metric_power=None, partial_inverse=None):
    def radial(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        return r1 + r2 - 2.0 * kfun(d) * np.sqrt(r1 * r2)

    def grad(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        k = kfun(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.sqrt(r2 / r1)
            g1 = 1.0 - k * q
            g2 = 1.0 - k / q
        both0 = (r1 == 0) & (r2 == 0)
        g1 = np.where(both0, 1.0 - k, g1)
        g2 = np.where(both0, 1.0 - k, g2)
        g1 = np.where(np.isnan(g1), 1.0, g1)
        g2 = np.where(np.isnan(g2), 1.0, g2)
        return g1, g2

    def hess(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        k = kfun(d)
        s = np.sqrt(r1 * r2)
        h11 = 0.5 * k * np.sqrt(r2) / (r1 * np.sqrt(r1))
        h22 = 0.5 * k * np.sqrt(r1) / (r2 * np.sqrt(r2))
        h12 = -0.5 * k / s
        return h11, h12, h22

    def dx_factor(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        return -2.0 * np.sqrt(r1 * r2) * kprime_over_d(d)

    def conj_closed(b, d, side):
        b, d = _arr(b, d)
        k = np.maximum(kfun(d), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = 1.0 - k * k / (1.0 - b)
        val = np.where(b < 1.0, val, np.where((b == 1.0) & (k == 0.0), 1.0, -INF))
        return np.where(np.isneginf(b), 1.0, val)

    kmin = min(float(kfun(np.array(d))) for d in _PROBE_D)
    return CostFunction(
        name=name,
        spec=spec,
        radial=radial,
        grad=grad,
        hess=hess,
        dx_factor=dx_factor,
        conj_closed=conj_closed,
        radially_convex=kmin >= 0.0,
        finite_everywhere=True,
        metric_power=metric_power,
        partial_inverse=partial_inverse,
        meta={"kfun": kfun, "root": True},
    )


def _ghk_k(d):
    d = np.asarray(d, float)
    return np.exp(-0.5 * d * d)


def _ghk_kp(d):
    return -_ghk_k(d)


def _cos_trunc(T):
    def k(d):
        d = np.asarray(d, float)
        # cos(pi/2) is 6e-17 in floating point; the truncated cosine is exactly 0
        a = np.minimum(d, T)
        return np.where(a == HALF_PI, 0.0, np.cos(a))

    def kp(d):
        d = np.asarray(d, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = -np.sin(d) / d
        v = np.where(d == 0, -1.0, v)
        return np.where(d < T, v, 0.0)

    return k, kp


def ghk_inverse(v0, c0, x1=None):
    """Invert the x1- and r1-partials of the GHK cost at [x1, 1].

    Given v0 = d/dx1 H([x1,1],[y,q]) and c0 = d/dr1 H([x1,1],[y,q]), returns
    (y - x1, q); c0 = 1 means the partner is the vertex and returns
    (None, 0.0).  Raises for c0 > 1, which no GHK pair produces.
    """
    v0 = np.atleast_1d(np.asarray(v0, float))
    c0 = float(c0)
    if c0 > 1.0 + 1e-12:
        raise ValueError(f"c0 = {c0} exceeds 1: not a GHK partial")
    if c0 >= 1.0:
        return None, 0.0
    one = 1.0 - c0
    offset = -v0 / (2.0 * one)
    q = one * one * math.exp(float(v0 @ v0) / (4.0 * one * one))
    return offset, q


def make_ghk() -> CostFunction:
    """Gaussian Hellinger-Kantorovich: r1 + r2 - 2 sqrt(r1 r2) exp(-|x1-x2|^2/2)."""
    return _root_family("ghk", {"kind": "ghk"}, _ghk_k, _ghk_kp, metric_power=2.0,
                        partial_inverse=ghk_inverse)


def make_hk() -> CostFunction:
    """Hellinger-Kantorovich: r1 + r2 - 2 sqrt(r1 r2) cos(|x1-x2| ^ pi/2)."""
    k, kp = _cos_trunc(HALF_PI)
    return _root_family("hk", {"kind": "hk"}, k, kp, metric_power=2.0)


# --------------------------------------------------------------------------
# cone powers d_C(T_q y1, T_q y2)^p

def make_cone_power(p: float, q: float, truncation: float = HALF_PI) -> CostFunction:
    """H = cone_distance(T_q y1, T_q y2)^p with the given angle truncation."""
    if p != q:
        raise ValueError("cone power cost needs p == q to be radially 1-homogeneous")
    if p < 1:
        raise ValueError("p must be >= 1")
    if not (np.isclose(truncation, math.pi) or np.isclose(truncation, HALF_PI)):
        raise ValueError("truncation must be pi or pi/2")
    trunc_name = "pi" if np.isclose(truncation, math.pi) else "pi/2"
    spec = {"kind": "cone_power", "p": float(p), "q": float(q), "truncation": trunc_name}
    if p == 2:
        k, kp = _cos_trunc(truncation)
        cost = _root_family(f"cone_power(2,2,{trunc_name})", spec, k, kp, metric_power=2.0)
        return cost

    e = 1.0 / p

    def radial(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        cos = np.cos(np.minimum(d, truncation))
        a, b = r1 ** e, r2 ** e
        u = np.maximum(a * a + b * b - 2 * a * b * cos, 0.0)
        return u ** (p / 2.0)

    def grad(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        cos = np.cos(np.minimum(d, truncation))
        a, b = r1 ** e, r2 ** e
        u = np.maximum(a * a + b * b - 2 * a * b * cos, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            pre = np.where(u > 0, u, 1.0) ** (p / 2.0 - 1.0)
            g1 = pre * (a * a - a * b * cos) / r1
            g2 = pre * (b * b - a * b * cos) / r2
        # coincident cone points (u = 0): 0 is a subgradient for p >= 1
        g1 = np.where((u > 0) & (r1 > 0), g1, 0.0)
        g2 = np.where((u > 0) & (r2 > 0), g2, 0.0)
        if p == 1:
            # |d/dr (distance)| <= 1; clip round-off from cancellation in u
            g1, g2 = np.clip(g1, -1.0, 1.0), np.clip(g2, -1.0, 1.0)
        return g1, g2

    return CostFunction(
        name=f"cone_power({p:g},{q:g},{trunc_name})",
        spec=spec,
        radial=radial,
        grad=grad,
        radially_convex=_is_radially_convex(radial, _PROBE_D),
        finite_everywhere=True,
        metric_power=float(p),
    )


# --------------------------------------------------------------------------
# product costs H+ (r1, r2) + H- (r1, r2) c(x1, x2)

def mass_block(spec: dict) -> Callable:
    """Mass-space building blocks m_p, n_alpha and the root difference."""
    kind = spec.get("block")
    if kind == "m":
        p = _num_from_json(spec["p"])

        def f(r1, r2):
            r1, r2 = _arr(r1, r2)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                if p == INF:
                    return np.maximum(r1, r2)
                if p == -INF:
                    return -np.minimum(r1, r2)
                if p == 0:
                    return -np.sqrt(r1 * r2)
                if p < 0:
                    v = -(r1 ** p + r2 ** p) ** (1.0 / p)
                    return np.where(r1 * r2 == 0, 0.0, v)
                v = (r1 ** p + r2 ** p) ** (1.0 / p)
                return v if p >= 1 else -v
        return f
    if kind == "n":
        alpha = float(spec["alpha"])

        def f(r1, r2):
            r1, r2 = _arr(r1, r2)
            s = r1 + r2
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.abs(r1 - r2) ** alpha / s ** (alpha - 1.0)
            return np.where(s == 0, 0.0, v)
        return f
    if kind == "diffroot":
        alpha = float(spec["alpha"])

        def f(r1, r2):
            r1, r2 = _arr(r1, r2)
            return np.abs(r1 ** alpha - r2 ** alpha) ** (1.0 / alpha)
        return f
    raise ValueError(f"unknown mass block {spec!r}")


def make_product(plus: dict, minus: dict, ground: str = "distance") -> CostFunction:
    """H = H+(r1, r2) + H-(r1, r2) * c(d) with named ground cost c."""
    if ground not in GROUNDS:
        raise ValueError(f"unknown ground cost {ground!r}")
    hp, hm, cfun = mass_block(plus), mass_block(minus), GROUNDS[ground]

    def radial(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        # a zero radius is the cone vertex, which has no position: use c at d = 0
        c = np.where(r1 * r2 > 0, cfun(d), cfun(np.zeros_like(d)))
        m = hm(r1, r2)
        with np.errstate(invalid="ignore"):
            term = np.where(m == 0, 0.0, m * c)
        return hp(r1, r2) + term

    t = np.linspace(0, 1, 101)
    for d in _PROBE_D:
        v = radial(1 - t, t, d)
        if np.any(np.isnan(v)) or np.any(v < -1e-12):
            raise ValueError("product cost is negative somewhere: not an admissible cost")
    finite = all(np.all(np.isfinite(radial(1 - t, t, d))) for d in _PROBE_D)
    return CostFunction(
        name=f"product({plus['block']}{plus.get('p', plus.get('alpha'))},{minus['block']}{minus.get('p', minus.get('alpha'))},{ground})",
        spec={"kind": "product", "plus": plus, "minus": minus, "ground": ground},
        radial=radial,
        radially_convex=_is_radially_convex(radial, _PROBE_D),
        finite_everywhere=finite,
    )


# --------------------------------------------------------------------------
# perspective costs inf_theta r1 F1(theta/r1) + r2 F2(theta/r2) + theta c

_THETA_GRID = np.concatenate([np.linspace(-30.0, -6.0, 25), np.linspace(-5.99, 5.99, 1199), np.linspace(6.0, 30.0, 25)])


def _perspective_numeric(F1: EntropySpec, F2: EntropySpec, cfun):
    def term(F, r, theta):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = r * F(np.where(r > 0, theta / np.where(r > 0, r, 1.0), 1.0))
        rec = F.recession
        return np.where(r > 0, v, theta * rec if rec < INF else INF)

    def radial(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        shape = r1.shape
        r1, r2, d = r1.ravel(), r2.ravel(), d.ravel()
        c = cfun(d)
        scale = np.where(r1 + r2 > 0, r1 + r2, 1.0)
        with np.errstate(invalid="ignore"):
            at0 = np.where(r1 > 0, r1 * F1.at_zero, 0.0) + np.where(r2 > 0, r2 * F2.at_zero, 0.0)

        def obj(u):
            theta = scale * np.exp(u)
            with np.errstate(invalid="ignore"):
                v = term(F1, r1, theta) + term(F2, r2, theta) + np.where(c == INF, INF, theta * np.where(c == INF, 0, c))
            return np.where(np.isnan(v), INF, v)

        grid = _THETA_GRID
        vals = np.stack([obj(np.full_like(r1, u)) for u in grid])
        k = np.argmin(vals, axis=0)
        lo = grid[np.maximum(k - 1, 0)]
        hi = grid[np.minimum(k + 1, len(grid) - 1)]
        _, best = golden_min(obj, lo, hi, iters=200)
        best = np.minimum(best, vals.min(axis=0))
        out = np.minimum(best, at0)
        out = np.where((r1 == 0) & (r2 == 0), 0.0, out)
        return out.reshape(shape)

    return radial


def make_perspective(F1: EntropySpec, F2: EntropySpec, ground: str = "sqdistance") -> CostFunction:
    """Perspective cost built from entropies F1, F2 and ground cost c(d).

    Closed forms are used for equal power entropies, equal indicators and
    the chi^1 case; everything else goes through a 1-d minimisation over
    theta on a log scale.
    """
    if ground not in GROUNDS:
        raise ValueError(f"unknown ground cost {ground!r}")
    cfun = GROUNDS[ground]
    spec = {"kind": "perspective", "F1": F1.to_json(), "F2": F2.to_json(), "ground": ground}
    name = f"perspective({F1.kind}{F1.p if F1.kind == 'power' else ''},{ground})"
    numeric = _perspective_numeric(F1, F2, cfun)

    if F1 == F2 and F1.kind == "power":
        p = F1.p
        if p == 1.0:
            def k(d):
                return np.exp(-0.5 * cfun(d))
            if ground == "sqdistance":
                kp = _ghk_kp
            elif ground == "hk":
                kp = _cos_trunc(HALF_PI)[1]
            elif ground == "zero":
                def kp(d):
                    return np.zeros_like(np.asarray(d, float))
            else:
                def kp(d):
                    d = np.asarray(d, float)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        v = -0.5 * np.exp(-0.5 * d) / d
                    return np.where(d == 0, 0.0, v)
            cost = _root_family(name, spec, k, kp)
            return _with(cost, meta={**cost.meta, "numeric": numeric})
        if p == 0.0:
            def radial(r1, r2, d):
                r1, r2, d = _arr(r1, r2, d)
                c = cfun(d)
                s = r1 + r2
                with np.errstate(divide="ignore", invalid="ignore"):
                    xl = np.where(r1 > 0, r1 * np.log(np.where(r1 > 0, r1, 1)), 0.0)
                    yl = np.where(r2 > 0, r2 * np.log(np.where(r2 > 0, r2, 1)), 0.0)
                    v = xl + yl - s * np.log(s / (2.0 + c))
                v = np.where(c == INF, np.where(s > 0, INF, 0.0), v)
                return np.where(s == 0, 0.0, v)

            def grad(r1, r2, d):
                r1, r2, d = _arr(r1, r2, d)
                c = cfun(d)
                s = r1 + r2
                with np.errstate(divide="ignore", invalid="ignore"):
                    g1 = np.log(r1 * (2.0 + c) / s)
                    g2 = np.log(r2 * (2.0 + c) / s)
                return g1, g2

            def hess(r1, r2, d):
                r1, r2, d = _arr(r1, r2, d)
                s = r1 + r2
                return 1.0 / r1 - 1.0 / s, -1.0 / s, 1.0 / r2 - 1.0 / s

            return CostFunction(name, spec, radial, grad, hess, radially_convex=True,
                                finite_everywhere=ground != "hk", meta={"numeric": numeric})

        def parts(r1, r2, d):
            r1, r2, d = _arr(r1, r2, d)
            c = cfun(d)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                S = r1 ** (1.0 - p) + r2 ** (1.0 - p)
                T = S ** (-1.0 / (p - 1.0))
                D = 2.0 - (p - 1.0) * c
                K = np.maximum(D, 0.0) ** (p / (p - 1.0))
            return r1, r2, T, K

        def radial(r1, r2, d):
            r1, r2, T, K = parts(r1, r2, d)
            with np.errstate(invalid="ignore"):
                prod = np.where(T == 0, 0.0, T * K)
                v = ((r1 + r2) - prod) / p
            return np.where((r1 == 0) & (r2 == 0), 0.0, v)

        def grad(r1, r2, d):
            r1, r2, T, K = parts(r1, r2, d)
            with np.errstate(divide="ignore", invalid="ignore"):
                u1, u2 = T / r1, T / r2
                g1 = (1.0 - K * u1 ** p) / p
                g2 = (1.0 - K * u2 ** p) / p
            return g1, g2

        def hess(r1, r2, d):
            r1, r2, T, K = parts(r1, r2, d)
            u1, u2 = T / r1, T / r2
            h11 = K * u1 ** p * (1.0 - u1 ** (p - 1.0)) / r1
            h22 = K * u2 ** p * (1.0 - u2 ** (p - 1.0)) / r2
            h12 = -K * u1 ** (p - 1.0) * u2 ** p / r1
            return h11, h12, h22

        return CostFunction(name, spec, radial, grad, hess, radially_convex=True,
                            finite_everywhere=p > 0 or ground != "hk",
                            meta={"numeric": numeric})

    if F1 == F2 and F1.kind == "indicator":
        a, b = F1.a, F1.b
        q = a / b if b < INF else 0.0

        def radial(r1, r2, d):
            r1, r2, d = _arr(r1, r2, d)
            c = cfun(d)
            lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
            ok = a * hi <= b * lo * (1 + 1e-12) if b < INF else (lo > 0) | (a == 0)
            base = np.where(a == 0, 0.0, a * c * hi) if a > 0 else np.zeros_like(c)
            with np.errstate(invalid="ignore"):
                base = np.where(hi == 0, 0.0, base)
            return np.where((r1 == 0) & (r2 == 0), 0.0, np.where(ok, base, INF))

        return CostFunction(name, spec, radial, domain=(q, q), radially_convex=True,
                            finite_everywhere=False, meta={"numeric": numeric})

    if F1 == F2 and F1.kind == "chi" and F1.alpha == 1.0:
        def radial(r1, r2, d):
            r1, r2, d = _arr(r1, r2, d)
            c = cfun(d)
            return np.abs(r2 - r1) + np.minimum(c, 2.0) * np.minimum(r1, r2)

        return CostFunction(name, spec, radial, radially_convex=True, finite_everywhere=True,
                            meta={"numeric": numeric})

    t = np.linspace(0, 1, 41)
    finite = all(np.all(np.isfinite(numeric(1 - t, t, d))) for d in (0.0, 1.0, 3.0))
    return CostFunction(name, spec, numeric, radially_convex=True, finite_everywhere=finite,
                        meta={"numeric": numeric})


def _with(cost: CostFunction, **kw) -> CostFunction:
    from dataclasses import replace
    return replace(cost, **kw)


# --------------------------------------------------------------------------
# spec round trip

def cost_from_spec(spec: dict) -> CostFunction:
    """Build a cost from its JSON description."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValueError("cost spec needs a 'kind' field")
    kind = spec["kind"]
    if kind == "ghk":
        return make_ghk()
    if kind == "hk":
        return make_hk()
    if kind == "cone_power":
        return make_cone_power(float(spec.get("p", 2)), float(spec.get("q", 2)),
                               _num_from_json(spec.get("truncation", "pi/2")))
    if kind == "product":
        return make_product(spec["plus"], spec["minus"], spec.get("ground", "distance"))
    if kind == "perspective":
        return make_perspective(EntropySpec.from_json(spec["F1"]), EntropySpec.from_json(spec["F2"]),
                                spec.get("ground", "sqdistance"))
    raise ValueError(f"unknown cost kind {kind!r}")


# --------------------------------------------------------------------------
# envelopes and subgradients

def _envelope_profile(cost: CostFunction, d: float, resolution: int):
    """Lower convex hull of t -> H(1 - t, t; d) on a grid dense near 0 and 1."""
    k = np.arange(resolution)
    t = np.sin(0.5 * math.pi * k / (resolution - 1)) ** 2
    f = np.asarray(cost.radial(1.0 - t, t, np.full_like(t, d)), float)
    keep = np.isfinite(f)
    t, f = t[keep], f[keep]
    if len(t) == 0:
        return t, f
    hull_t, hull_f = [], []
    for ti, fi in zip(t, f):
        while len(hull_t) >= 2:
            t1, f1 = hull_t[-2], hull_f[-2]
            t2, f2 = hull_t[-1], hull_f[-1]
            if (f2 - f1) * (ti - t1) >= (fi - f1) * (t2 - t1):
                hull_t.pop()
                hull_f.pop()
            else:
                break
        hull_t.append(ti)
        hull_f.append(fi)
    return np.array(hull_t), np.array(hull_f)


def _evaluate_profile(ht, hf, r1, r2):
    r1, r2 = _arr(r1, r2)
    s = r1 + r2
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(s > 0, r2 / np.where(s > 0, s, 1.0), 0.0)
    if len(ht) == 0:
        return np.where(s == 0, 0.0, INF)
    inside = (t >= ht[0] - 1e-15) & (t <= ht[-1] + 1e-15)
    val = s * np.interp(t, ht, hf)
    return np.where(s == 0, 0.0, np.where(inside, val, INF))


def radial_cc_envelope(cost: CostFunction, x1, x2, resolution: int = 2048, space: Space | None = None):
    """Sublinear (closed convex) envelope of H restricted to the rays of x1, x2.

    Returns a vectorised function (r1, r2) -> envelope value computed as the
    supremum of linear minorants of H on `resolution` rays.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    x1 = np.atleast_1d(np.asarray(x1, float))
    x2 = np.atleast_1d(np.asarray(x2, float))
    space = space or Space(len(x1))
    d = float(space.distances([x1], [x2])[0, 0])
    ht, hf = _envelope_profile(cost, d, resolution)

    def env(r1, r2):
        return _evaluate_profile(ht, hf, r1, r2)

    return env


def envelope_cost(cost: CostFunction, resolution: int = 2048) -> CostFunction:
    """Replace H by its radial convex envelope, computed per ground distance."""
    cache: dict[float, tuple] = {}

    def profile(d):
        key = round(float(d), 12)
        if key not in cache:
            cache[key] = _envelope_profile(cost, key, resolution)
        return cache[key]

    def radial(r1, r2, d):
        r1, r2, d = _arr(r1, r2, d)
        out = np.empty(r1.shape)
        flat_d = d.ravel()
        out_flat = out.ravel()
        r1f, r2f = r1.ravel(), r2.ravel()
        for dv in np.unique(flat_d):
            sel = flat_d == dv
            ht, hf = profile(dv)
            out_flat[sel] = _evaluate_profile(ht, hf, r1f[sel], r2f[sel])
        return out_flat.reshape(r1.shape)

    spec = {"kind": "envelope", "of": cost.to_spec(), "resolution": resolution}
    return CostFunction(f"cc[{cost.name}]", spec, radial, radially_convex=True,
                        finite_everywhere=cost.finite_everywhere, metric_power=cost.metric_power)


def radial_subgradient(cost: CostFunction, y1: ConePoint, y2: ConePoint, space: Space | None = None):
    """(a, b) in the radial subdifferential of H at an interior pair."""
    if y1.is_vertex or y2.is_vertex:
        raise ValueError("radial subgradient needs both radii positive")
    space = space or Space(len(y1.x))
    d = float(space.distances([y1.x], [y2.x])[0, 0])
    h = 1e-6
    probe = cost.radial(np.array([y1.r * (1 + h), y1.r * (1 - h), y1.r, y1.r]),
                        np.array([y2.r, y2.r, y2.r * (1 + h), y2.r * (1 - h)]), d)
    if not np.all(np.isfinite(probe)):
        raise ValueError("point is not in the radial interior of the domain")
    g1, g2 = cost.radial_grad(y1.r, y2.r, d)
    return float(g1), float(g2)


def position_partial(cost: CostFunction, y1: ConePoint, y2: ConePoint) -> np.ndarray:
    """Closed-form derivative of H in x1 (Euclidean spaces only)."""
    if cost.dx_factor is None:
        raise ValueError(f"{cost.name} has no closed-form position derivative")
    if y1.is_vertex or y2.is_vertex:
        raise ValueError("position derivative needs both points off the vertex")
    x1, x2 = np.array(y1.x), np.array(y2.x)
    d = float(np.linalg.norm(x1 - x2))
    return float(cost.dx_factor(y1.r, y2.r, d)) * (x1 - x2)


def builtin_costs(radially_convex_only: bool = True) -> dict[str, CostFunction]:
    """The named cost catalogue, keyed by a short label."""
    out = {
        "ghk": make_ghk(),
        "hk": make_hk(),
        "cone_power(1,1,pi)": make_cone_power(1, 1, math.pi),
        "cone_power(1,1,pi/2)": make_cone_power(1, 1, HALF_PI),
        "cone_power(2,2,pi/2)": make_cone_power(2, 2, HALF_PI),
        "cone_power(2,2,pi)": make_cone_power(2, 2, math.pi),
        "perspective(power0,sqdistance)": make_perspective(EntropySpec.power(0), EntropySpec.power(0)),
        "perspective(power2,sqdistance)": make_perspective(EntropySpec.power(2), EntropySpec.power(2)),
        "perspective(chi1,distance)": make_perspective(EntropySpec.chi(1), EntropySpec.chi(1), "distance"),
        "product(n1,m1,distance)": make_product({"block": "n", "alpha": 1}, {"block": "m", "p": 1}, "distance"),
        "product(n2,m1,sqdistance)": make_product({"block": "n", "alpha": 2}, {"block": "m", "p": 1}, "sqdistance"),
    }
    if radially_convex_only:
        out = {k: v for k, v in out.items() if v.radially_convex}
    return out
