import numpy as np
import pytest

from qdiff.harness import load_config
from qdiff.lattice import DensityMatrixInit, HoppingKernel, LatticeConfig
from qdiff.system import PeriodicSystem

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def r1():
    cfg = LatticeConfig(1, 3)
    return PeriodicSystem.jiggling(cfg, HoppingKernel.nearest_neighbour(1), [1.0, 0.0, -1.0], rate=1.0)


@pytest.fixture(scope="session")
def d2n2():
    return load_config("d2n2").system()


@pytest.fixture(scope="session")
def d2n3():
    return load_config("d2n3").system()


@pytest.fixture
def delta0():
    return DensityMatrixInit.delta(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
