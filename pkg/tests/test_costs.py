import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conicuot.cone import VERTEX, ConePoint
from conicuot.costs import (EntropySpec, builtin_costs, cost_from_spec, envelope_cost, ghk_inverse,
                            make_cone_power, make_ghk, make_hk, make_perspective, make_product,
                            mass_block, position_partial, radial_cc_envelope, radial_subgradient)

ALL = builtin_costs(radially_convex_only=False)
# zero or a normal float: scaling a subnormal radius underflows to 0
radius = st.one_of(st.just(0.0), st.floats(1e-6, 5.0))


def P(x, r):
    return ConePoint(np.atleast_1d(x), r) if r > 0 else VERTEX


# ---- root family ---------------------------------------------------------------------

def test_ghk_values():
    g = make_ghk()
    assert g.eval(P(0.4, 1), P(0.4, 1)) == 0.0
    assert g.eval(P(0.0, 1), VERTEX) == 1.0
    assert g.eval(P(0.0, 1), P(0.0, 4)) == pytest.approx(1.0, abs=1e-15)


def test_hk_truncates_beyond_half_pi():
    hk = make_hk()
    for z in (math.pi / 2, 2.0, 10.0):
        assert hk.eval(P(0.0, 1), P(z, 1)) == 2.0


def test_cone_power_values():
    c = make_cone_power(2, 2, math.pi / 2)
    r1, r2 = 2.0, 3.0
    assert c.radial(r1, r2, 0.0) == pytest.approx((math.sqrt(r1) - math.sqrt(r2)) ** 2, abs=1e-14)
    assert c.eval(P(0.0, 1.7), VERTEX) == pytest.approx(1.7)
    assert make_cone_power(2, 2, math.pi).radial(1.0, 1.0, math.pi) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        make_cone_power(2, 1)


def test_cone_power_pi_is_not_radially_convex():
    assert not make_cone_power(2, 2, math.pi).radially_convex
    assert make_cone_power(2, 2, math.pi / 2).radially_convex


# ---- mass-space products --------------------------------------------------------------

def test_mass_blocks():
    assert mass_block({"block": "m", "p": "-inf"})(2.0, 3.0) == -2.0
    assert mass_block({"block": "n", "alpha": 2})(1.0, 1.0) == 0.0
    assert mass_block({"block": "m", "p": 1})(2.0, 3.0) == 5.0


def test_product_with_zero_ground():
    c = make_product({"block": "m", "p": 1}, {"block": "m", "p": 0}, "zero")
    assert c.radial(2.0, 3.0, 7.0) == 5.0


def test_negative_product_rejected():
    with pytest.raises(ValueError):
        make_product({"block": "m", "p": 1}, {"block": "m", "p": 0}, "distance")


def test_product_is_well_defined_at_the_vertex():
    # a zero radius has no position, so the value cannot depend on the ground distance
    c = make_product({"block": "n", "alpha": 1}, {"block": "m", "p": 1}, "distance")
    assert c.radial(2.0, 0.0, 0.0) == c.radial(2.0, 0.0, 5.0) == 2.0
    assert c.radial(0.0, 3.0, 9.0) == 3.0
    assert c.radial(1.0, 1.0, 2.0) == 4.0


def test_product_lowered_at_the_axes_is_not_radially_convex():
    c = make_product({"block": "n", "alpha": 1}, {"block": "m", "p": 1}, "distance")
    # H(1, 1/2) = 1/2 + 3d/2 exceeds the chord (H(1, 0) + H(1, 1)) / 2 = 1/2 + d
    assert not c.radially_convex
    assert "product(n1,m1,distance)" not in builtin_costs()


def test_product_solves_through_its_envelope():
    from conicuot.cone import DiscreteMeasure, Space
    from conicuot.primal import Instance, solve_semicoupling
    c = make_product({"block": "n", "alpha": 1}, {"block": "m", "p": 1}, "distance")
    mu1 = DiscreteMeasure.from_arrays([[0.0]], [1.0], Space(1))
    mu2 = DiscreteMeasure.from_arrays([[2.0]], [1.0], Space(1))
    rep = solve_semicoupling(Instance(mu1, mu2, c))
    # destroying and creating the unit mass (2) beats moving it (2 d = 4)
    assert rep.envelope_substituted and rep.value == pytest.approx(2.0, abs=1e-6)


# ---- perspective costs -----------------------------------------------------------------

def test_entropy_power_one_reproduces_ghk(rng):
    pc = make_perspective(EntropySpec.power(1), EntropySpec.power(1), "sqdistance")
    g = make_ghk()
    r1, r2, d = rng.uniform(0, 3, 200), rng.uniform(0, 3, 200), rng.uniform(0, 4, 200)
    assert np.allclose(pc.radial(r1, r2, d), g.radial(r1, r2, d), atol=1e-13)


@pytest.mark.parametrize("F", [EntropySpec.power(0), EntropySpec.power(1), EntropySpec.power(2),
                               EntropySpec.power(0.5), EntropySpec.chi(1), EntropySpec.indicator(0.5, 2.0)])
def test_closed_forms_match_numeric_minimisation(F, rng):
    c = make_perspective(F, F, "sqdistance")
    numeric = c.meta["numeric"]
    r1, r2, d = rng.uniform(0.05, 3, 60), rng.uniform(0.05, 3, 60), rng.uniform(0, 2.5, 60)
    a, b = c.radial(r1, r2, d), numeric(r1, r2, d)
    fin = np.isfinite(a)
    assert np.array_equal(fin, np.isfinite(b))
    assert np.allclose(a[fin], b[fin], atol=1e-6, rtol=1e-6)


def test_unit_indicator_forces_equal_radii():
    c = make_perspective(EntropySpec.indicator(1, 1), EntropySpec.indicator(1, 1), "sqdistance")
    assert c.radial(1.0, 1.0, 0.0) == 0.0
    assert c.radial(1.0, 2.0, 0.0) == math.inf


def test_chi_one_value():
    c = make_perspective(EntropySpec.chi(1), EntropySpec.chi(1), "distance")
    # |r2 - r1| + min(c, 2) min(r1, r2) with c = 3
    assert c.radial(1.0, 2.0, 3.0) == 3.0


def test_entropy_validation():
    with pytest.raises(ValueError):
        EntropySpec.indicator(2.0, 3.0)
    with pytest.raises(ValueError):
        EntropySpec("bogus")


# ---- properties shared by the catalogue -------------------------------------------------

@pytest.mark.parametrize("name", sorted(ALL))
def test_vanishes_at_double_vertex(name):
    assert ALL[name].eval(VERTEX, VERTEX) == 0.0


@pytest.mark.parametrize("name", sorted(ALL))
@given(r1=radius, r2=radius, d=st.floats(0.0, 4.0), lam=st.floats(0.01, 20.0))
def test_radial_one_homogeneity(name, r1, r2, d, lam):
    c = ALL[name]
    a, b = float(c.radial(lam * r1, lam * r2, d)), lam * float(c.radial(r1, r2, d))
    if math.isinf(a) or math.isinf(b):
        assert a == b
    else:
        assert a == pytest.approx(b, abs=1e-9 * (1 + abs(b)))


@pytest.mark.parametrize("name", sorted(ALL))
def test_spec_round_trip(name, rng):
    c = ALL[name]
    back = cost_from_spec(c.to_spec())
    r1, r2, d = rng.uniform(0, 3, 30), rng.uniform(0, 3, 30), rng.uniform(0, 3, 30)
    assert np.array_equal(back.radial(r1, r2, d), c.radial(r1, r2, d))


def test_unknown_cost_spec():
    with pytest.raises(ValueError):
        cost_from_spec({"kind": "nope"})


# ---- conjugates -------------------------------------------------------------------------

@pytest.mark.parametrize("cost", [make_ghk(), make_hk()], ids=["ghk", "hk"])
def test_closed_conjugate_matches_grid_infimum(cost, rng):
    g = np.concatenate([[0.0], np.logspace(-6, 6, 20001)])
    for _ in range(30):
        b, d = rng.uniform(-3, 0.99), rng.uniform(0, 3)
        brute = np.min(cost.radial(1.0, g, d) - b * g)
        assert float(cost.conj(b, d)) == pytest.approx(brute, abs=1e-6)


def test_conjugate_beyond_recession_slope():
    g = make_ghk()
    assert float(g.conj(1.0 + 1e-9, 0.3)) == -math.inf
    # slope exactly 1 with k = 0 (HK past pi/2): H(1, g) - g = 1
    assert float(make_hk().conj(1.0, 2.0)) == 1.0


# ---- envelopes ---------------------------------------------------------------------------

def test_envelope_of_convex_cost_is_itself():
    g = make_ghk()
    env = radial_cc_envelope(g, [0.0], [0.9], resolution=10_000)
    R1, R2 = np.meshgrid(np.linspace(0, 2, 25), np.linspace(0, 2, 25))
    assert np.max(np.abs(env(R1, R2) - g.radial(R1, R2, 0.9))) <= 1e-3


def test_envelope_at_antipodes():
    c = make_cone_power(2, 2, math.pi)
    env = radial_cc_envelope(c, [0.0], [math.pi])
    assert float(env(1.0, 1.0)) == pytest.approx(2.0, abs=1e-3)
    assert float(env(0.0, 0.0)) == 0.0


def test_envelope_cost_is_flagged_convex():
    c = envelope_cost(make_cone_power(2, 2, math.pi))
    assert c.radially_convex
    assert float(c.radial(1.0, 1.0, math.pi)) == pytest.approx(2.0, abs=1e-3)


# ---- derivatives -------------------------------------------------------------------------

def test_subgradient_values():
    g = make_ghk()
    assert radial_subgradient(g, P(0.0, 1), P(0.0, 1)) == (0.0, 0.0)
    g1, _ = radial_subgradient(g, P(0.0, 1), P(0.0, 4))
    assert g1 == pytest.approx(-1.0, abs=1e-15)


@pytest.mark.parametrize("cost", [make_ghk(), make_hk()], ids=["ghk", "hk"])
def test_subgradient_inequality(cost, rng):
    for _ in range(100):
        y1, y2 = P(rng.normal(), rng.uniform(0.1, 3)), P(rng.normal(), rng.uniform(0.1, 3))
        d = abs(y1.x[0] - y2.x[0])
        a, b = radial_subgradient(cost, y1, y2)
        s1, s2 = rng.uniform(0, 4, 2)
        lhs = float(cost.radial(s1, s2, d)) - cost.eval(y1, y2)
        assert lhs >= a * (s1 - y1.r) + b * (s2 - y2.r) - 1e-12


def test_subgradient_rejects_vertex():
    with pytest.raises(ValueError):
        radial_subgradient(make_ghk(), P(0.0, 1), VERTEX)


def test_position_partial_of_ghk():
    g = make_ghk()
    y1, y2 = P([0.2, -0.1], 1.3), P([1.0, 0.5], 0.7)
    x1, x2 = np.array(y1.x), np.array(y2.x)
    d2 = np.sum((x1 - x2) ** 2)
    expected = 2 * math.sqrt(1.3 * 0.7) * math.exp(-d2 / 2) * (x1 - x2)
    assert np.allclose(position_partial(g, y1, y2), expected, atol=1e-14)


# ---- inverse of the GHK partials ------------------------------------------------------------

def test_ghk_inverse_fixed_points():
    offset, q = ghk_inverse([0.0, 0.0], 0.0)
    assert np.array_equal(offset, [0.0, 0.0]) and q == 1.0
    assert ghk_inverse([0.3], 1.0) == (None, 0.0)
    with pytest.raises(ValueError):
        ghk_inverse([0.0], 1.5)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 5))
def test_ghk_inverse_round_trip(y0, y1, q):
    g = make_ghk()
    y = np.array([y0, y1])
    v0 = position_partial(g, P([0.0, 0.0], 1.0), P(y, q))
    c0, _ = g.radial_grad(1.0, q, float(np.linalg.norm(y)))
    offset, q_back = ghk_inverse(v0, float(c0))
    assert np.allclose(offset, y, atol=1e-9)
    assert q_back == pytest.approx(q, rel=1e-9)


@pytest.mark.parametrize("p", [1.0, 1.5, 3.0])
def test_cone_power_gradient_matches_differences(p, rng):
    c = make_cone_power(p, p, math.pi)
    r1, r2, d = rng.uniform(0.2, 2, 50), rng.uniform(0.2, 2, 50), rng.uniform(0, 3, 50)
    g1, g2 = c.radial_grad(r1, r2, d)
    h = 1e-6
    assert np.allclose(g1, (c.radial(r1 + h, r2, d) - c.radial(r1 - h, r2, d)) / (2 * h), atol=1e-7)
    assert np.allclose(g2, (c.radial(r1, r2 + h, d) - c.radial(r1, r2 - h, d)) / (2 * h), atol=1e-7)


def test_cone_distance_gradient_at_coincident_points():
    c = make_cone_power(1, 1, math.pi)
    r = np.array([0.3, 1e-14, 2.0])
    g1, g2 = c.radial_grad(r, r * (1 + 1e-16), np.zeros(3))
    assert np.all(np.abs(g1) <= 1) and np.all(np.abs(g2) <= 1)
