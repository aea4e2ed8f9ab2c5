import json
from pathlib import Path

import numpy as np
import pytest

from mfgfinite import QuadraticModel

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture(scope="session")
def own():
    """d=2, F=G=own mass, kappa=0.5, M=1.5, b=1, T=1."""
    return QuadraticModel()


@pytest.fixture(scope="session")
def own3():
    return QuadraticModel(d=3)


@pytest.fixture(scope="session")
def zero():
    return QuadraticModel(F="zero", G="zero")


@pytest.fixture(scope="session")
def state_cost():
    # m-independent but state-dependent costs
    return QuadraticModel(F=[0.3, 0.0], G=[0.0, 0.5])


@pytest.fixture(scope="session")
def mfg_07(own):
    from mfgfinite import solve_mfg

    return solve_mfg(own, 0.0, np.array([0.7, 0.3]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(pytestconfig):
    """Recorder for acceptance outcomes: ``record(criterion, label, value, bound, ok)``."""
    lines = pytestconfig.stash.setdefault(ACCEPTANCE, [])

    def record(criterion, label, value, bound, ok):
        tag = "PASS" if ok else "FAIL"
        lines.append(f"[{tag}] {criterion:>2} {label}: {value:.4g} (bound {bound})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
