import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_chamfer(x, y):
    """Independent oracle: full pairwise matrix via broadcasting."""
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def restricted_brute_chamfer(x, lx, y, ly):
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    d = np.where(lx[:, None] == ly[None, :], d, np.inf)
    return d.min(axis=1).mean() + d.min(axis=0).mean()
