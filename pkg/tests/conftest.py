import numpy as np
import pytest

from ddminmax.consistency import build_offline
from ddminmax.plant import builtin_scenario, collect_offline
from ddminmax import sdp

# c for suspension certificates; the scenario default is infeasible
SUSPENSION_FEASIBLE_C = 5e7

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scalar():
    return builtin_scenario("scalar")


@pytest.fixture(scope="session")
def suspension():
    return builtin_scenario("suspension")


@pytest.fixture(scope="session")
def scalar_set(scalar):
    return build_offline(collect_offline(scalar, 0))


@pytest.fixture(scope="session")
def suspension_set(suspension):
    return build_offline(collect_offline(suspension, 0))


@pytest.fixture(scope="session")
def scalar_solved(scalar, scalar_set):
    prob = sdp.assemble_robust(scalar_set, scalar.x0, scalar.weights, scalar.constraints, 50.0)
    return prob, sdp.solve(prob)


@pytest.fixture(scope="session")
def suspension_solved(suspension, suspension_set):
    prob = sdp.assemble_robust(suspension_set, suspension.x0, suspension.weights,
                               suspension.constraints, SUSPENSION_FEASIBLE_C)
    return prob, sdp.solve(prob)
