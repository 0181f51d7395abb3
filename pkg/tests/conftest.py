import numpy as np
import pytest
from hypothesis import settings

from delayadapt.dataio import partition_batches, synth_logreg
from delayadapt.numkit import LogisticProblem, reference_solution

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def small_logistic(n=4, m=1, lam1=1e-3, lam2=1e-2, d=10, N=40, seed=0, separability=2.0):
    data = synth_logreg(N, d, seed, separability=separability)
    prob = LogisticProblem(data, partition_batches(data, n), lam1=lam1, lam2=lam2, m=m)
    reference_solution(prob)
    return prob


@pytest.fixture(scope="session")
def logistic4():
    return small_logistic()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
