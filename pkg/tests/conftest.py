import numpy as np
import pytest

from bwh.cell_problems import first_auxiliary
from bwh.effective import effective_coefficients, find_critical
from bwh.fields import free_medium, mathieu_medium


@pytest.fixture(scope="session")
def mathieu():
    return mathieu_medium(cutoff=8, amplitude=1.0)


@pytest.fixture(scope="session")
def mathieu_u():
    return mathieu_medium(cutoff=8, amplitude=1.0, u_amplitude=0.4)


@pytest.fixture(scope="session")
def free1d():
    return free_medium(dim=1, cutoff=4)


@pytest.fixture(scope="session")
def mathieu_point(mathieu):
    return find_critical(mathieu, band=0, theta_init=[0.0])


@pytest.fixture(scope="session")
def mathieu_aux(mathieu, mathieu_point):
    return first_auxiliary(mathieu, mathieu_point)


@pytest.fixture(scope="session")
def mathieu_eff(mathieu, mathieu_point, mathieu_aux):
    return effective_coefficients(mathieu, mathieu_point, mathieu_aux)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
