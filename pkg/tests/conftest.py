import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skld.spectral import Nonlinearity, build_config

settings.register_profile("skld", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("skld")


def sin_nonlinearity(amplitude=0.5):
    return Nonlinearity.nemytskii(lambda xi, s: amplitude * np.sin(s), abs(amplitude),
                                  db=lambda xi, s: amplitude * np.cos(s), label=f"{amplitude} sin")


@pytest.fixture
def cfg8():
    return build_config(n_modes=8)


@pytest.fixture
def cfg1():
    return build_config(n_modes=1)


@pytest.fixture
def sin_b():
    return sin_nonlinearity()
