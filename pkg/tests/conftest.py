import numpy as np
import pytest

from attrnet import tensor as T


@pytest.fixture(autouse=True)
def _reset_precision():
    T.set_precision("float32")
    yield
    T.set_precision("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(results):
            terminalreporter.write_line(results[criterion])
