"""Unbalanced optimal transport through the cone construction.

Discrete measures live on a metric space X; mass variations are handled
by lifting them to the cone C[X] = X x [0, inf) / (X x {0}), where a point
[x, r] carries radius r and all zero-radius points collapse to the vertex.
"""

from .cone import (
    ConePoint,
    DiscreteMeasure,
    HomogeneousCoupling,
    Space,
    VERTEX,
    barycentric_projection,
    cone_distance,
    dilate_normalize,
    homogeneous_marginal,
    radial_rescale,
)
from .costs import (
    CostFunction,
    EntropySpec,
    cost_from_spec,
    make_cone_power,
    make_ghk,
    make_hk,
    make_perspective,
    make_product,
    radial_cc_envelope,
    radial_subgradient,
)
from .primal import (
    Instance,
    SemiCoupling,
    SolveOptions,
    SolveReport,
    brute_force_value,
    distinguished_decomposition,
    solve_semicoupling,
    to_homogeneous_coupling,
    uot_value,
)
from .dual import (
    PotentialPair,
    complementary_slackness,
    dual_ascent,
    duality_gap,
    feasible,
    h_transform,
)
from .optimality import (
    NegativeCycle,
    SupportSet,
    Walk,
    WalkGraph,
    build_graph,
    check_connectedness,
    check_cyclical_monotonicity,
    walk_cost,
    walk_potential,
)
from .costs import ghk_inverse
from .monge import (
    TransportGrowthMap,
    extract_map,
    gaussian_grid_instance,
    induced_coupling,
    monge_cost,
    pushforward,
)
from .metrics import (
    ConeMeasure,
    MetricReport,
    compare_lift,
    cone_lift_ot,
    convergence_diag,
    metric_axioms_test,
    uot_distance,
)

__all__ = [name for name in dir() if not name.startswith("_")]
