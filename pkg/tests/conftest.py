import numpy as np
import pytest

from stepflow.core import Problem
from stepflow.envs import ArithChainEnv, Environment, FlowGridEnv


class ChoiceEnv(Environment):
    """One step: pick an answer among ``n``; only ``0`` is correct.

    A uniformly random completion of the empty prefix succeeds with
    probability exactly ``1/n``.
    """

    name = "choice"
    supports_success_probability = True

    def __init__(self, n: int = 4):
        self.n = n
        self._problem = Problem("choice", f"Pick a number below {n}.", "0")

    def problems(self):
        return [self._problem]

    def legal_steps(self, state):
        return [] if state.steps else [f"answer: \\boxed{{{i}}}" for i in range(self.n)]

    def is_terminal(self, state):
        return bool(state.steps)

    def is_correct(self, state):
        return state.steps[-1].text == "answer: \\boxed{0}"


@pytest.fixture
def arith():
    return ArithChainEnv(n_problems=6, seed=0)


@pytest.fixture
def small_arith():
    return ArithChainEnv(n_problems=3, digits=(1, 2), ops=("+", "*"), max_depth=2, seed=1)


@pytest.fixture
def grid():
    return FlowGridEnv(2, 3)


@pytest.fixture
def choice_env():
    return ChoiceEnv(4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
