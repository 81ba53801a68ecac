import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pmf(space, rng, zero_frac=0.0):
    from dfguide.statespace import Pmf, enumerate_states

    w = rng.random(space.n_states) + 0.01
    if zero_frac:
        w[rng.random(space.n_states) < zero_frac] = 0.0
        if w.sum() == 0:
            w[0] = 1.0
    if space.mask_symbol is not None:
        w[~space.is_data_state(enumerate_states(space))] = 0.0
    return Pmf.from_unnormalized(space, w)


def as_dict(pmf):
    from dfguide.statespace import enumerate_states

    return {tuple(int(v) for v in s): float(p) for s, p in zip(enumerate_states(pmf.space), pmf.weights)}
