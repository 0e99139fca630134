import numpy as np
import pytest
from hypothesis import settings

from slotground.acceptance import TINY_GEN, TINY_MODEL, tiny_setup

settings.register_profile("desk", deadline=None, max_examples=60)
settings.load_profile("desk")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny():
    """Six small prepared scenes and a freshly initialised model on a 4x4 grid."""
    cache, params = tiny_setup(6, seed=0)
    return cache, params, TINY_MODEL, TINY_GEN


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for n, m in sys.modules.items() if n.endswith("test_acceptance")), None)
    RESULTS = getattr(mod, "RESULTS", [])
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for r in sorted(RESULTS, key=lambda r: r.id):
            terminalreporter.write_line(r.line())
