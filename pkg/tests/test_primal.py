import math

import numpy as np
import pytest

from conicuot.cone import DiscreteMeasure, HomogeneousCoupling, Space, homogeneous_marginal
from conicuot.costs import make_cone_power, make_ghk, make_hk
from conicuot.primal import (Instance, SemiCoupling, SolveOptions, brute_force_value,
                             distinguished_decomposition, solve_semicoupling, to_homogeneous_coupling,
                             uot_value)

from conftest import random_instance, random_measure


def dirac(x, m, dim=1):
    return DiscreteMeasure.from_arrays(np.reshape(x, (1, dim)), [m], Space(dim))


def null(dim=1):
    return DiscreteMeasure.from_arrays(np.zeros((0, dim)), [], Space(dim))


def ghk_closed(r1, r2, d):
    return r1 + r2 - 2 * math.exp(-d * d / 2) * math.sqrt(r1 * r2)


# ---- worked values ------------------------------------------------------------------

def test_dirac_masses_at_one_point():
    # 2 + 8 - 2 sqrt(16)
    assert uot_value(dirac(0.0, 2.0), dirac(0.0, 8.0), make_ghk()) == pytest.approx(2.0, abs=1e-12)


def test_destruction_against_null_measure():
    rep = solve_semicoupling(Instance(dirac(0.0, 1.0), null(), make_ghk()))
    assert rep.value == 1.0 and rep.converged
    assert rep.coupling.destroyed.tolist() == [1.0]


def test_both_null():
    assert uot_value(null(), null(), make_ghk()) == 0.0


def test_identical_measures_cost_nothing(rng, root_cost):
    mu = random_measure(rng, 7)
    rep = solve_semicoupling(Instance(mu, mu, root_cost))
    assert rep.value == 0.0
    assert np.allclose(np.diag(rep.coupling.A), mu.masses, rtol=1e-15, atol=0)


@pytest.mark.parametrize("cost", [make_ghk(), make_hk(), make_cone_power(2, 2, math.pi / 2)],
                         ids=["ghk", "hk", "cone_power"])
def test_diracs_reproduce_the_cost(cost, rng):
    for _ in range(10):
        x, y = rng.normal(size=2), rng.normal(size=2)
        r1, r2 = rng.uniform(0.1, 3, 2)
        H = float(cost.radial(r1, r2, np.linalg.norm(x - y)))
        val = uot_value(dirac(x, r1, 2), dirac(y, r2, 2), cost)
        assert val == pytest.approx(H, abs=1e-6 * (1 + H))


# ---- brute force oracle ----------------------------------------------------------------

def test_brute_force_on_one_by_one_is_exact():
    inst = Instance(dirac(0.0, 2.0), dirac(0.7, 3.0), make_ghk())
    assert brute_force_value(inst) == pytest.approx(ghk_closed(2.0, 3.0, 0.7), abs=1e-14)


def test_one_to_two_split_matches_brute_force():
    mu2 = DiscreteMeasure.from_arrays([[0.0], [1.0]], [0.5, 0.5], Space(1))
    inst = Instance(dirac(0.0, 1.0), mu2, make_ghk())
    val = solve_semicoupling(inst).value
    assert abs(val - brute_force_value(inst, 1024)) <= 1e-4


def test_brute_force_refinement_is_monotone(rng):
    for _ in range(5):
        inst = random_instance(rng, make_ghk(), 1, 3)
        assert brute_force_value(inst, 1024) <= brute_force_value(inst, 2) + 1e-12


def test_brute_force_rejects_large_instances(rng):
    with pytest.raises(ValueError):
        brute_force_value(random_instance(rng, make_ghk(), 2, 3))


@pytest.mark.parametrize("shape", [(1, 2), (2, 1), (1, 3), (3, 1), (2, 2)])
def test_solver_agrees_with_brute_force(shape, rng, root_cost):
    for _ in range(3):
        inst = random_instance(rng, root_cost, *shape)
        bf = brute_force_value(inst, 1024)
        assert abs(solve_semicoupling(inst).value - bf) <= 1e-4 * (1 + bf)


# ---- structural invariants ----------------------------------------------------------------

def test_reported_value_is_the_objective_of_the_coupling(rng, root_cost):
    for _ in range(5):
        inst = random_instance(rng, root_cost)
        rep = solve_semicoupling(inst)
        assert rep.coupling.value(inst) == rep.value
        assert rep.coupling.marginal_error(inst) <= 1e-12


def test_permutation_invariance(rng, root_cost):
    inst = random_instance(rng, root_cost, 5, 6)
    p1, p2 = rng.permutation(5), rng.permutation(6)
    mu1 = DiscreteMeasure.from_arrays(inst.mu1.positions[p1], inst.mu1.masses[p1], inst.space)
    mu2 = DiscreteMeasure.from_arrays(inst.mu2.positions[p2], inst.mu2.masses[p2], inst.space)
    a = solve_semicoupling(inst).value
    b = uot_value(mu1, mu2, root_cost)
    assert b == pytest.approx(a, rel=1e-8, abs=1e-12)


def test_swapping_the_measures_keeps_the_value(rng, root_cost):
    from conicuot.metrics import triple_measures
    # symmetric costs: the barrier path must not drift apart on transposed problems;
    # the seeded pair is one where the active set was once misidentified
    mus = triple_measures(20240611, 216)
    pairs = [(mus[0], mus[2])]
    for _ in range(10):
        pairs.append((random_measure(rng, int(rng.integers(2, 6))), random_measure(rng, int(rng.integers(2, 6)))))
    for mu, nu in pairs:
        a, b = uot_value(mu, nu, root_cost), uot_value(nu, mu, root_cost)
        assert abs(a - b) <= 1e-11 * (1 + a)


@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_joint_mass_scaling(lam, rng, root_cost):
    inst = random_instance(rng, root_cost, 4, 5)
    scaled = uot_value(inst.mu1.scaled(lam), inst.mu2.scaled(lam), root_cost)
    assert scaled == pytest.approx(lam * solve_semicoupling(inst).value, rel=1e-8, abs=1e-12)


def test_doubling_both_measures_doubles_the_cost(rng):
    inst = random_instance(rng, make_ghk(), 3, 3)
    assert uot_value(inst.mu1.scaled(2), inst.mu2.scaled(2), make_ghk()) == \
        pytest.approx(2 * solve_semicoupling(inst).value, rel=1e-8)


def test_sublinearity_on_random_splits(rng, root_cost):
    for _ in range(5):
        inst = random_instance(rng, root_cost, 4, 4)
        t1, t2 = rng.uniform(0, 1, 4), rng.uniform(0, 1, 4)
        part = lambda mu, t: DiscreteMeasure.from_arrays(mu.positions, t * mu.masses, mu.space)
        first = uot_value(part(inst.mu1, t1), part(inst.mu2, t2), root_cost)
        second = uot_value(part(inst.mu1, 1 - t1), part(inst.mu2, 1 - t2), root_cost)
        assert solve_semicoupling(inst).value <= first + second + 1e-8


def test_non_convex_cost_is_solved_with_its_envelope():
    c = make_cone_power(2, 2, math.pi)
    inst = Instance(dirac(0.0, 1.0), dirac(math.pi, 1.0), c)
    rep = solve_semicoupling(inst)
    assert rep.envelope_substituted
    # destroying and creating the unit masses (1 + 1) beats moving them (4)
    assert rep.value == pytest.approx(2.0, abs=1e-3)


def test_iteration_limit_is_reported():
    inst = random_instance(np.random.default_rng(3), make_hk(), 6, 6)
    rep = solve_semicoupling(inst, SolveOptions(max_iter=1, method="apg"))
    assert not rep.converged and rep.message
    with pytest.raises(ValueError):
        solve_semicoupling(inst, SolveOptions(max_iter=0))


def test_instance_json_round_trip(rng):
    inst = random_instance(rng, make_hk(), 3, 2)
    back = Instance.from_json(inst.to_json())
    assert back.fingerprint == inst.fingerprint
    with pytest.raises(ValueError):
        Instance.from_json({"mu1": inst.mu1.to_json()})


def test_semicoupling_validation():
    with pytest.raises(ValueError):
        SemiCoupling.from_matrices([[1.0]], [[-1.0]])
    with pytest.raises(ValueError):
        SemiCoupling.from_matrices([[1.0, 0.0]], [[1.0]])


# ---- homogeneous couplings -----------------------------------------------------------------

def test_identity_cell_becomes_one_atom():
    inst = Instance(dirac(0.5, 2.0), dirac(0.5, 2.0), make_ghk())
    alpha = to_homogeneous_coupling(SemiCoupling.from_matrices([[2.0]], [[2.0]]), inst)
    assert len(alpha) == 1
    assert alpha.r1.tolist() == [2.0] and alpha.r2.tolist() == [2.0] and alpha.w.tolist() == [1.0]


def test_destruction_cell_has_vertex_partner():
    mu2 = DiscreteMeasure.from_arrays([[0.0], [3.0]], [1.0, 1.0], Space(1))
    inst = Instance(dirac(0.0, 2.0), mu2, make_ghk())
    alpha = to_homogeneous_coupling(SemiCoupling.from_matrices([[1.0, 1.0]], [[1.0, 0.0]]), inst)
    dest = alpha.r2 == 0
    assert dest.sum() == 1 and np.isnan(alpha.x2[dest]).all()


def test_homogeneous_coupling_reproduces_marginals_and_value(rng, root_cost):
    for _ in range(5):
        inst = random_instance(rng, root_cost)
        rep = solve_semicoupling(inst)
        alpha = to_homogeneous_coupling(rep.coupling, inst)
        for side, mu in ((1, inst.mu1), (2, inst.mu2)):
            marg = homogeneous_marginal(alpha, side, inst.space)
            idx = mu.index_of(marg.positions)
            assert np.all(idx >= 0) and len(marg) == len(mu)
            assert np.max(np.abs(marg.masses - mu.masses[idx])) <= 1e-12
        assert alpha.cost(root_cost, inst.space) == pytest.approx(rep.value, abs=1e-10)


# ---- decomposition ---------------------------------------------------------------------------

def test_all_transport_has_null_singular_parts():
    alpha = HomogeneousCoupling([[0.0]], [1.0], [[1.0]], [2.0], [1.0])
    dec = distinguished_decomposition(alpha)
    assert len(dec.mu1_s) == 0 and len(dec.mu2_s) == 0


def test_single_destruction_atom():
    alpha = HomogeneousCoupling([[0.3]], [1.0], [[np.nan]], [0.0], [1.0])
    dec = distinguished_decomposition(alpha)
    assert dec.mu1_s.positions.tolist() == [[0.3]] and dec.mu1_s.masses.tolist() == [1.0]
    assert len(dec.mu1_t) == 0 and len(dec.mu2_t) == 0 and len(dec.mu2_s) == 0


def test_mixed_atoms_recompose_the_marginals():
    mu1 = DiscreteMeasure.from_arrays([[0.0], [5.0]], [1.0, 2.0], Space(1))
    mu2 = DiscreteMeasure.from_arrays([[0.1], [-6.0]], [1.5, 0.5], Space(1))
    inst = Instance(mu1, mu2, make_ghk())
    alpha = HomogeneousCoupling([[0.0], [5.0], [np.nan]], [1.0, 2.0, 0.0],
                                [[0.1], [np.nan], [-6.0]], [1.5, 0.0, 0.5], [1.0, 1.0, 1.0])
    dec = distinguished_decomposition(alpha, inst)
    for t, s, mu in ((dec.mu1_t, dec.mu1_s, mu1), (dec.mu2_t, dec.mu2_s, mu2)):
        total = np.zeros(len(mu))
        for part in (t, s):
            np.add.at(total, mu.index_of(part.positions), part.masses)
        assert np.max(np.abs(total - mu.masses)) <= 1e-12
    assert dec.S1_s.tolist() == [[5.0]] and dec.S2_s.tolist() == [[-6.0]]


def test_far_apart_cell_costs_destruction_plus_creation():
    # HK moves no mass beyond distance pi/2: the single cell costs 1 + 2
    rep = solve_semicoupling(Instance(dirac(0.0, 1.0), dirac(3.0, 2.0), make_hk()))
    assert rep.value == pytest.approx(3.0, abs=1e-12)


def test_decomposition_of_solver_output_against_null_target():
    mu1 = DiscreteMeasure.from_arrays([[0.0], [1.0]], [1.0, 2.0], Space(1))
    inst = Instance(mu1, null(), make_ghk())
    rep = solve_semicoupling(inst)
    dec = distinguished_decomposition(to_homogeneous_coupling(rep.coupling, inst), inst)
    assert len(dec.mu1_t) == 0 and dec.mu1_s.total_mass == pytest.approx(3.0, abs=1e-15)
