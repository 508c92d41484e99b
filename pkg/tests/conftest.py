import numpy as np
import pytest

from krasovskii.dynamics import ContinuousDynamics, SampledSystem
from krasovskii.plants import LinearPHS


def scalar_decay(delta=0.1):
    """``xdot = -x + u``."""
    cont = ContinuousDynamics(1, 1, lambda x, u: -x + u, lambda x, u: -np.eye(1), lambda x, u: np.eye(1))
    return SampledSystem(cont, delta)


def scalar_lph(d=0.0):
    return LinearPHS(J=[[0.0]], R=[[1.0]], H=[[1.0]], B=[[1.0]], d=[d])


@pytest.fixture
def rng():
    return np.random.default_rng(20241016)
