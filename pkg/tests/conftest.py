import numpy as np
import pytest

from mhmoe.tensor import Rng, Tensor

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randt(rng, *shape, requires_grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


@pytest.fixture
def mh_rng():
    return Rng(7)
