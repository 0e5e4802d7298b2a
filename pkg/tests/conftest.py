import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cooccur.nnet import FLATTEN, RELU, SiameseNet, conv, fc

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_net(seed=0, side=9):
    """A Siamese net small enough for exhaustive finite differences."""
    branch = [conv(3, 4, 3, 2), RELU, conv(4, 4, 3, 1), RELU, FLATTEN, fc(16, 6)]
    head = [fc(12, 5), RELU, fc(5, 1)]
    return SiameseNet.create(side, branch, head, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
