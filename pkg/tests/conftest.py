import numpy as np
import pytest

from lvrtcsr.csr import assess_fault, build_problem
from lvrtcsr.data import load_case

# one-line verdicts from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record(criterion: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case():
    return load_case()


@pytest.fixture(scope="session")
def problem(case):
    model, scenario = case
    return build_problem(model, scenario)


@pytest.fixture(scope="session")
def assessment(problem):
    return assess_fault(problem)


@pytest.fixture(scope="session")
def x0(assessment):
    return assessment.x0


@pytest.fixture
def rng():
    return np.random.default_rng(0)
