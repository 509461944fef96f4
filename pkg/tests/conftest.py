import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from afbsbo.attn_sim import WorkloadSpec, generate_workload

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=5, deadline=None)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# small enough that every head prepares in milliseconds
SMALL_SPEC = WorkloadSpec(layers=1, heads=2, head_dim=16, seq_len_low=64, seq_len_high=128, block_size=8,
                          bandwidth=12.0, sinks=4, rank=2, noise=0.15, seed=3)


@pytest.fixture(scope="session")
def small_workload():
    return generate_workload(SMALL_SPEC)


@pytest.fixture(scope="session")
def standard_workload():
    """The default 4-layer, 5-head suite."""
    return generate_workload(WorkloadSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    test_acceptance = sys.modules.get("test_acceptance")
    if test_acceptance is not None and test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.summary_lines(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
