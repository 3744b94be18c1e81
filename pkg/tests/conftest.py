import numpy as np
import pytest

from hodgestrata import bundle as B
from hodgestrata.surface import build_bolza_octagon, build_torus_spectral

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def torus():
    return build_torus_spectral(16)


@pytest.fixture(scope="session")
def bolza():
    return build_bolza_octagon(0.05)


@pytest.fixture(scope="session")
def bolza_coarse():
    return build_bolza_octagon(0.07)


@pytest.fixture(scope="session")
def v2(bolza):
    return B.make_fuchsian(bolza, 2)


@pytest.fixture(scope="session")
def v3(bolza):
    return B.make_fuchsian(bolza, 3)


@pytest.fixture(scope="session")
def torus_vhs(torus):
    return B.make_chain(torus, [0, 0], [1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
