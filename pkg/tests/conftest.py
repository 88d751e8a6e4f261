import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from conicuot.cone import DiscreteMeasure, Space
from conicuot.costs import make_ghk, make_hk
from conicuot.primal import Instance

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_measure(rng, k, dim=2, scale=1.0):
    X = rng.normal(0.0, scale, (k, dim))
    return DiscreteMeasure.from_arrays(X, rng.uniform(0.3, 2.0, k), Space(dim))


def random_instance(rng, cost, m=None, n=None, dim=2):
    m = m or int(rng.integers(1, 11))
    n = n or int(rng.integers(1, 11))
    return Instance(random_measure(rng, m, dim), random_measure(rng, n, dim), cost)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=["ghk", "hk"])
def root_cost(request):
    return make_ghk() if request.param == "ghk" else make_hk()
