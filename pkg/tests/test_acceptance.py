"""Acceptance suite: ten end-to-end criteria at their stated tolerances and budgets.

Each criterion returns (passed, detail); the test wrapper prints one
PASS/FAIL line per criterion and then asserts.  Run this file directly to
get only the summary lines.
"""
import functools
import math
import sys
import time

import numpy as np
import pytest

from conicuot.cone import DiscreteMeasure, Space, homogeneous_marginal
from conicuot.costs import builtin_costs, make_cone_power, make_ghk, make_hk, radial_cc_envelope
from conicuot.dual import PotentialPair, complementary_slackness, dual_ascent, duality_gap
from conicuot.metrics import metric_axioms_test
from conicuot.monge import extract_map, gaussian_grid_instance
from conicuot.optimality import SupportSet, check_cyclical_monotonicity
from conicuot.primal import (Instance, brute_force_value, solve_semicoupling, to_homogeneous_coupling,
                             uot_value)

SEED = 20240611


def dirac(x, r):
    return DiscreteMeasure.from_arrays(np.reshape(x, (1, -1)), [r], Space(len(x)))


def random_measure(rng, k, dim=2):
    return DiscreteMeasure.from_arrays(rng.normal(size=(k, dim)), rng.uniform(0.3, 2.0, k), Space(dim))


@functools.lru_cache(maxsize=None)
def duality_instances():
    """100 random GHK/HK instances with m, n <= 10, solved and certified once."""
    rng = np.random.default_rng([SEED, 2])
    out = []
    for t in range(100):
        cost = make_ghk() if t % 2 == 0 else make_hk()
        m, n = (int(v) for v in rng.integers(1, 11, 2))
        inst = Instance(random_measure(rng, m), random_measure(rng, n), cost)
        primal = solve_semicoupling(inst)
        # ascent started from the solver's first multipliers
        dual = dual_ascent(inst, init=primal.phi1)
        out.append((inst, primal, dual))
    return out


# ---- criteria ------------------------------------------------------------------------------

def c1_dirac_identity():
    rng = np.random.default_rng([SEED, 1])
    worst, where = 0.0, None
    for name, cost in builtin_costs().items():
        for _ in range(200):
            x, y = rng.normal(size=2), rng.normal(size=2)
            r1, r2 = rng.uniform(0.05, 5.0, 2)
            H = float(cost.radial(r1, r2, np.linalg.norm(x - y)))
            val = uot_value(dirac(x, r1), dirac(y, r2), cost)
            err = 0.0 if val == H else abs(val - H) / (1 + abs(H))
            if not err <= worst:
                worst, where = err, name
    return worst <= 1e-6, f"{len(builtin_costs())} costs x 200, worst relative error {worst:.2e} ({where})"


def c2_strong_duality():
    worst = max(duality_gap(p, d).gap / (1 + p.value) for _, p, d in duality_instances())
    return worst <= 1e-6, f"100 instances, worst gap/(1+value) {worst:.2e}"


def c3_oracle_equivalence():
    rng = np.random.default_rng([SEED, 3])
    shapes = [(1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (1, 4), (4, 1), (1, 5), (5, 1)]
    worst, count = 0.0, 0
    for cost in (make_ghk(), make_hk()):
        todo = [s for s in shapes for _ in range(5)] + [(2, 2)] * 3
        for m, n in todo:
            inst = Instance(random_measure(rng, m), random_measure(rng, n), cost)
            val = solve_semicoupling(inst).value
            worst = max(worst, abs(val - brute_force_value(inst, 1024)) / (1 + val))
            count += 1
    return worst <= 1e-4, f"{count} instances with <= 4 free scalars, worst {worst:.2e}"


def c4_conical_equivalence():
    rng = np.random.default_rng([SEED, 4])
    marg = integ = 0.0
    costs = list(builtin_costs().values())
    for t in range(100):
        cost = costs[t % len(costs)]
        m, n = (int(v) for v in rng.integers(1, 9, 2))
        inst = Instance(random_measure(rng, m), random_measure(rng, n), cost)
        rep = solve_semicoupling(inst)
        alpha = to_homogeneous_coupling(rep.coupling, inst)
        for side, mu in ((1, inst.mu1), (2, inst.mu2)):
            hm = homogeneous_marginal(alpha, side, inst.space)
            idx = mu.index_of(hm.positions)
            if np.any(idx < 0) or len(hm) != len(mu):
                return False, f"instance {t}: marginal support differs"
            marg = max(marg, float(np.max(np.abs(hm.masses - mu.masses[idx]))))
        integ = max(integ, abs(alpha.cost(inst.cost, inst.space) - rep.value))
    return marg <= 1e-12 and integ <= 1e-10, f"marginal error {marg:.1e}, H-integral error {integ:.1e}"


def c5_metric_axioms():
    out, ok = [], True
    for cost in (make_ghk(), make_cone_power(2, 2, math.pi / 2)):
        rep = metric_axioms_test(cost, n_samples=500, seed=SEED)
        ok &= rep.passed
        out.append(f"{cost.name}: {rep.triangle_violations} violations, symmetry {rep.symmetry_defect:.0e},"
                   f" identity {rep.identity_defect:.0e}")
    return ok, "; ".join(out)


def c6_envelope_identity():
    full, half = make_cone_power(2, 2, math.pi), make_cone_power(2, 2, math.pi / 2)
    r = np.linspace(0.0, 3.0, 50)
    R1, R2 = np.meshgrid(r, r, indexing="ij")
    worst = 0.0
    for d in np.linspace(0.0, 4.0, 20):
        env = radial_cc_envelope(full, [0.0], [d], resolution=2048)
        worst = max(worst, float(np.max(np.abs(env(R1, R2) - half.radial(R1, R2, d)))))
    return worst <= 1e-3, f"50x50 radii x 20 distances, max error {worst:.2e}"


def c7_monotonicity():
    rng = np.random.default_rng([SEED, 7])
    bad = 0
    for t in range(50):
        cost = make_ghk() if t % 2 == 0 else make_hk()
        m, n = (int(v) for v in rng.integers(2, 9, 2))
        inst = Instance(random_measure(rng, m), random_measure(rng, n), cost)
        alpha = to_homogeneous_coupling(solve_semicoupling(inst).coupling, inst)
        rep = check_cyclical_monotonicity(SupportSet.from_coupling(alpha), cost, max_cycle=4, tol=1e-8)
        bad += not rep.monotone
    crossed = SupportSet([[0.0], [3.0]], [1.0, 1.0], [[3.0], [0.0]], [1.0, 1.0])
    caught = not check_cyclical_monotonicity(crossed, make_ghk(), max_cycle=4, tol=1e-8).monotone
    return bad == 0 and caught, f"{50 - bad}/50 optimal supports monotone, crossed pair rejected: {caught}"


def c8_slackness():
    failures = 0
    for inst, primal, dual in duality_instances():
        alpha = to_homogeneous_coupling(primal.coupling, inst)
        failures += bool(complementary_slackness(alpha, dual.pair, inst, tol=1e-6))
    return failures == 0, f"{100 - failures}/100 instances certified"


def c9_monge_refinement():
    rows = []
    for res in (8, 16, 32):
        inst = gaussian_grid_instance(res, make_ghk())
        rep = solve_semicoupling(inst)
        _, m = extract_map(inst, PotentialPair(rep.phi1, rep.phi2), value=rep.value, coupling=rep.coupling)
        rows.append((res, abs(m.gap), m.marginal_error, rep.value))
    gaps = [g for _, g, _, _ in rows]
    errs = [e for _, _, e, _ in rows]
    trend = gaps[0] > gaps[1] > gaps[2] and errs[0] > errs[1] > errs[2]
    share = gaps[-1] / rows[-1][3]
    table = ", ".join(f"N={r}: |gap|/value {g / v:.3f} marginal {e:.3f}" for r, g, e, v in rows)
    return trend and share <= 0.10, f"{table}; monotone: {trend}; share at 32 <= 0.10: {share <= 0.10}"


def _fd(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def c10_gradients():
    rng = np.random.default_rng([SEED, 10])
    worst, h = 0.0, 1e-6
    for cost in (make_ghk(), make_hk()):
        for _ in range(500):
            x1, x2 = rng.normal(size=2), rng.normal(size=2) * 0.8
            r1, r2 = rng.uniform(0.2, 3.0, 2)
            d = np.linalg.norm(x1 - x2)
            if cost.name == "hk" and abs(d - math.pi / 2) < 1e-3:
                x2 = x1 + (x2 - x1) * 0.9  # stay away from the cut-off kink
                d = np.linalg.norm(x1 - x2)
            g1, g2 = (float(v) for v in cost.radial_grad(r1, r2, d))
            gx = float(cost.dx_factor(r1, r2, d)) * (x1 - x2)

            def H(p1, p2, y1):
                return float(cost.radial(p1, p2, np.linalg.norm(y1 - x2)))

            fd = [_fd(lambda s: H(s, r2, x1), r1, h), _fd(lambda s: H(r1, s, x1), r2, h)]
            fd += [_fd(lambda s: H(r1, r2, x1 + s * e), 0.0, h) for e in np.eye(2)]
            worst = max(worst, float(np.max(np.abs(np.array([g1, g2, *gx]) - fd))))
    return worst <= 1e-5, f"1000 points, max |closed form - central difference| {worst:.1e}"


CRITERIA = [
    ("C1", "Dirac identity", c1_dirac_identity, 30),
    ("C2", "strong duality", c2_strong_duality, 300),
    ("C3", "brute-force oracle", c3_oracle_equivalence, 120),
    ("C4", "semi-coupling vs conical formulation", c4_conical_equivalence, None),
    ("C5", "metric axioms", c5_metric_axioms, 600),
    ("C6", "envelope identity", c6_envelope_identity, 60),
    ("C7", "cyclical monotonicity", c7_monotonicity, 300),
    ("C8", "complementary slackness", c8_slackness, None),
    ("C9", "Monge refinement", c9_monge_refinement, 600),
    ("C10", "gradient checks", c10_gradients, 10),
]


def evaluate(fn, budget):
    t0 = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - t0
    if budget is not None and elapsed > budget:
        ok, detail = False, f"{detail}; over budget ({elapsed:.0f} s > {budget} s)"
    return ok, detail, elapsed


def line(tag, title, ok, detail, elapsed):
    return f"[{tag}] {'PASS' if ok else 'FAIL'} {title} ({elapsed:.1f} s): {detail}"


@pytest.mark.parametrize("tag,title,fn,budget", CRITERIA, ids=[c[0] for c in CRITERIA])
def test_criterion(tag, title, fn, budget, capsys):
    ok, detail, elapsed = evaluate(fn, budget)
    with capsys.disabled():
        print("\n" + line(tag, title, ok, detail, elapsed))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for tag, title, fn, budget in CRITERIA:
        ok, detail, elapsed = evaluate(fn, budget)
        results.append(ok)
        print(line(tag, title, ok, detail, elapsed), flush=True)
    sys.exit(0 if all(results) else 1)
