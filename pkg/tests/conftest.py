import numpy as np
import pytest

from nlhk.coefficients import ModelParams, make_coefficient
from nlhk.kernels import stable_constant

ACCEPTANCE = {}


def record(number, name, ok, detail=""):
    """Register an acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


A1 = stable_constant(1, 1.0)


def coef(spec, d=1, beta=1.0):
    return make_coefficient(spec, ModelParams(d, beta))


@pytest.fixture(scope="session")
def zero():
    return coef({"family": "zero", "params": {}})


@pytest.fixture(scope="session")
def half_a():
    return coef({"family": "constant", "params": {"c": 0.5 * A1}})


@pytest.fixture(scope="session")
def indicator():
    return coef({"family": "indicator", "params": {"M": 1.0, "lambda": 1.0}})


@pytest.fixture(scope="session")
def negative_shell():
    return coef({"family": "indicator", "params": {"M": -0.2, "r_min": 1.0, "lambda": 2.0}})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
