import numpy as np
import pytest

from structpop import build_grids, build_model, constant_scenario, singular_scenario
from structpop.malthus import MalthusProblem, solve_eigentriple, stationary_state
from structpop.pde import TransportSolver


class Setup:
    """Bundle of everything the constant-model tests keep reaching for."""

    def __init__(self, config):
        self.config = config
        self.model = build_model(config)
        self.tgrid, self.agrid = build_grids(config, self.model)
        self.problem = MalthusProblem(self.model, self.tgrid, self.agrid)
        self._triple = None
        self._solver = None

    @property
    def triple(self):
        if self._triple is None:
            self._triple = solve_eigentriple(self.problem)
        return self._triple

    @property
    def solver(self):
        if self._solver is None:
            self._solver = TransportSolver(self.model, self.tgrid, self.agrid)
        return self._solver

    def stationary(self):
        return stationary_state(self.problem, self.triple)


# PASS/FAIL lines recorded by the acceptance tests; replayed after the run
# so the report survives output capture.
acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance report")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def constant_setup():
    return Setup(constant_scenario())


@pytest.fixture(scope="session")
def singular_setup():
    return Setup(singular_scenario(nx=100))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
