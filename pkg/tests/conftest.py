from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from cmpekit.polymodel import build_instance, read_uai, to_polynomial

# first calls pay for JIT compilation, so per-example deadlines are meaningless here
settings.register_profile("cmpekit", deadline=None)
settings.load_profile("cmpekit")

DATA = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="session")
def pair():
    """Four-variable objective and constraint networks over scopes (0,2), (2,3), (1,3)."""
    m1 = read_uai(DATA / "example_m1.uai")
    m2 = read_uai(DATA / "example_m2.uai")
    return m1, m2


@pytest.fixture(scope="session")
def pair_polys(pair):
    return to_polynomial(pair[0]), to_polynomial(pair[1])


@pytest.fixture(scope="session")
def toy(pair):
    """Evidence x1 = x2 = 1, q = 20, objective 20 - h_x."""
    return build_instance(pair[0], pair[1], {0: 1, 1: 1}, 20.0, f_shift=20.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
