import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conicuot.cone import (VERTEX, ConePoint, DiscreteMeasure, HomogeneousCoupling, Space,
                           barycentric_projection, cone_distance, dilate_normalize,
                           homogeneous_marginal, radial_rescale)
from conicuot.costs import make_ghk

radius = st.floats(0.0, 10.0)
coord = st.floats(-5.0, 5.0)


def P(x, r):
    return ConePoint([x], r) if r > 0 else VERTEX


# ---- cone distance -----------------------------------------------------------

def test_distance_same_position_is_radius_difference():
    assert cone_distance(P(0.3, 2.0), P(0.3, 5.0)) == pytest.approx(3.0, abs=1e-12)


def test_distance_to_vertex_is_radius():
    assert cone_distance(P(1.0, 2.5), VERTEX) == 2.5
    assert cone_distance(VERTEX, VERTEX) == 0.0


def test_distance_at_antipodal_ground_distance():
    # r = s = 1, d = pi: sqrt(2 - 2 cos(pi)) = 2; truncated at pi/2: sqrt(2)
    assert cone_distance(P(0, 1), P(math.pi, 1)) == pytest.approx(2.0, abs=1e-12)
    assert cone_distance(P(0, 1), P(math.pi, 1), math.pi / 2) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_distance_rejects_other_truncations():
    with pytest.raises(ValueError):
        cone_distance(P(0, 1), P(1, 1), 1.0)


@given(coord, radius, coord, radius, coord, radius, st.sampled_from([math.pi, math.pi / 2]))
def test_distance_is_a_metric(x, r, y, s, z, t, trunc):
    a, b, c = P(x, r), P(y, s), P(z, t)
    dab = cone_distance(a, b, trunc)
    assert dab == pytest.approx(cone_distance(b, a, trunc), abs=1e-12)
    assert dab <= cone_distance(a, c, trunc) + cone_distance(c, b, trunc) + 1e-9
    assert cone_distance(a, a, trunc) <= 1e-6 * (1 + r)


@given(coord, radius, coord, radius, st.floats(0.0, 5.0))
def test_distance_is_positively_homogeneous(x, r, y, s, lam):
    a, b = P(x, r), P(y, s)
    scaled = cone_distance(P(x, lam * r), P(y, lam * s))
    assert scaled == pytest.approx(lam * cone_distance(a, b), abs=1e-9 * (1 + lam * (r + s)))


def test_vertex_identification():
    assert ConePoint([1.0], 0.0).is_vertex
    assert ConePoint([1.0], 0.0) == VERTEX
    with pytest.raises(ValueError):
        ConePoint(None, 1.0)
    with pytest.raises(ValueError):
        ConePoint([0.0], -1.0)


# ---- spaces and measures -------------------------------------------------------

def test_precomputed_metric_validation():
    Space(1, np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        Space(1, np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValueError):
        Space(1, np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 1.0], [3.0, 1.0, 0.0]]))


def test_measure_merges_coincident_atoms():
    mu = DiscreteMeasure.from_arrays([[0.0], [0.0], [1.0]], [1.0, 2.0, 0.5])
    assert len(mu) == 2
    assert mu.masses.tolist() == [3.0, 0.5]


def test_measure_rejects_bad_masses():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((1, 1)), np.array([-1.0]), Space(1))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((1, 1)), np.array([np.inf]), Space(1))


def test_measure_json_round_trip():
    mu = DiscreteMeasure.from_arrays([[0.0, 1.0], [2.0, -1.0]], [1.5, 0.25])
    back = DiscreteMeasure.from_json(mu.to_json())
    assert np.array_equal(back.positions, mu.positions)
    assert np.array_equal(back.masses, mu.masses)


# ---- homogeneous couplings -------------------------------------------------------

def one_atom(r1, r2, w=1.0, x=0.0, y=1.0, p=1.0):
    return HomogeneousCoupling([[x]], [r1], [[y]], [r2], [w], p)


def test_marginal_of_single_atom():
    mu = homogeneous_marginal(one_atom(2.0, 3.0), 1)
    assert mu.positions.tolist() == [[0.0]] and mu.masses.tolist() == [2.0]


def test_marginal_ignores_vertex():
    alpha = HomogeneousCoupling([[0.0]], [1.0], [[np.nan]], [0.0], [5.0])
    assert len(homogeneous_marginal(alpha, 2)) == 0


def test_marginal_sums_weighted_radii():
    alpha = HomogeneousCoupling([[0.0], [0.0]], [1.0, 3.0], [[1.0], [2.0]], [1.0, 1.0], [0.5, 0.5])
    assert homogeneous_marginal(alpha, 1).masses.tolist() == [2.0]


def test_dilation_of_unit_atom():
    # r* = w (r1 + r2) = 2 and theta = (r1 + r2) / r* = 1: the atom is already normalised
    out, rstar = dilate_normalize(one_atom(1.0, 1.0))
    assert rstar == 2.0
    assert out.r1.tolist() == [1.0] and out.r2.tolist() == [1.0] and out.w.tolist() == [1.0]


def test_dilation_gives_probability_and_keeps_marginals(rng):
    k = 6
    alpha = HomogeneousCoupling(rng.normal(size=(k, 2)), rng.uniform(0, 3, k), rng.normal(size=(k, 2)),
                                rng.uniform(0.1, 3, k), rng.uniform(0.1, 2, k), 2.0)
    out, _ = dilate_normalize(alpha)
    assert out.w.sum() == pytest.approx(1.0, abs=1e-12)
    for side in (1, 2):
        a, b = homogeneous_marginal(alpha, side), homogeneous_marginal(out, side)
        assert np.allclose(a.masses, b.masses, rtol=1e-12)


def test_dilation_keeps_normalised_singleton():
    out, rstar = dilate_normalize(one_atom(0.25, 0.75))
    assert rstar == 1.0
    assert out.r1.tolist() == [0.25] and out.w.tolist() == [1.0]


def test_radial_rescale():
    out = radial_rescale(one_atom(4.0, 9.0), 2)
    assert out.r1.tolist() == [2.0] and out.r2.tolist() == [3.0] and out.p == 2.0
    same = radial_rescale(one_atom(4.0, 9.0), 1)
    assert same.r1.tolist() == [4.0]
    # the 2-homogeneous marginal of the output is the 1-homogeneous marginal of the input
    assert homogeneous_marginal(out, 1).masses.tolist() == [4.0]


def test_barycentric_projection_merges_pairs():
    alpha = HomogeneousCoupling([[0.0], [0.0]], [1.0, 3.0], [[1.0], [1.0]], [1.0, 3.0], [1.0, 1.0])
    out = barycentric_projection(alpha, make_ghk())
    assert len(out) == 1
    assert out.r1.tolist() == [2.0] and out.r2.tolist() == [2.0] and out.w.tolist() == [2.0]
    assert out.cost(make_ghk()) <= alpha.cost(make_ghk()) + 1e-12


def test_barycentric_projection_keeps_singleton():
    alpha = one_atom(2.0, 0.5)
    out = barycentric_projection(alpha)
    assert out.r1.tolist() == [2.0] and out.r2.tolist() == [0.5]


def test_coupling_json_round_trip():
    alpha = HomogeneousCoupling([[0.0], [1.0]], [1.0, 2.0], [[np.nan], [3.0]], [0.0, 1.0], [1.0, 0.5])
    back = HomogeneousCoupling.from_json(alpha.to_json())
    assert np.array_equal(back.r1, alpha.r1) and np.array_equal(back.w, alpha.w)
    assert np.isnan(back.x2[0, 0])
