import numpy as np
import pytest

from gridstate.grid import build_admittance, bundled_case, load_case


def two_bus_doc(bs=0.0, **branch):
    br = {"from": 1, "to": 2, "g": 1.0, "b": -2.0, "bs": bs}
    br.update(branch)
    return {"buses": [{"id": 1}, {"id": 2}], "branches": [br], "ref_bus": 1}


def random_state(n, rng, spread=0.1):
    return (1 + spread * rng.uniform(-1, 1, n)) * np.exp(1j * spread * rng.uniform(-1, 1, n))


@pytest.fixture(scope="session")
def case14():
    return bundled_case("ieee14")


@pytest.fixture(scope="session")
def model14(case14):
    return build_admittance(case14)


@pytest.fixture
def two_bus():
    return load_case(two_bus_doc())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
