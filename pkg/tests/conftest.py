import numpy as np
import pytest

from vqforge.weightio import ModelBundle, WeightMatrix


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_bundle(rng):
    return ModelBundle([
        WeightMatrix("a", rng.standard_normal((4, 8))),
        WeightMatrix("b", rng.standard_normal((3, 6))),
        WeightMatrix("c.weight", rng.standard_normal((1, 2))),
    ])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
