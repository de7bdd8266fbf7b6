import numpy as np
import pytest

from mlqmcgrad.covariance import MaternParams, MeanField
from mlqmcgrad.estimators import LevelHierarchy
from mlqmcgrad.fem import TargetAndControl


def target_indicator(x):
    inside = np.minimum(
        np.minimum(x[:, 0] - 0.25, 0.75 - x[:, 0]),
        np.minimum(x[:, 1] - 0.25, 0.75 - x[:, 1]))
    return np.where(inside > 1e-12, 1.0, np.where(inside < -1e-12, 0.0, 0.5))


def control_bumps(x):
    return 5.0 * (1.0 - np.cos(2 * np.pi * x[:, 0])) \
        * (1.0 - np.cos(2 * np.pi * x[:, 1]))


def zero_fn(x):
    return np.zeros(x.shape[0])


PROBLEM1 = MaternParams(sigma2=0.1, lambda_c=1.0, nu=0.5)


def make_hierarchy(L=1, seed=123, **kwargs):
    objective = kwargs.pop("objective", None) or TargetAndControl(
        g=target_indicator, z=control_bumps, alpha=1e-4)
    return LevelHierarchy(PROBLEM1, MeanField(0.0), objective, L,
                          master_seed=seed, **kwargs)


@pytest.fixture(scope="session")
def hier2():
    """Shared 3-level Problem-1 hierarchy for estimator tests."""
    return make_hierarchy(L=2, seed=321)
