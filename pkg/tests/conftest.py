import numpy as np
import pytest
import torch

from volrep.cohort import CohortConfig, build_cohort

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config():
    return CohortConfig(n_studies=12, n_diagnoses=4, prevalence=0.4)


@pytest.fixture(scope="session")
def small_cohort(small_config):
    return build_cohort(small_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)
