import numpy as np
import pytest

from amdp_mirror.amdp import StochasticPolicy, TabularAmdp


def random_mdp(rng, S, A, floor=0.05) -> TabularAmdp:
    P = rng.dirichlet(np.ones(S), size=(S, A))
    P = (1 - floor) * P + floor / S
    P /= P.sum(axis=2, keepdims=True)
    return TabularAmdp(P, rng.random((S, A)))


def random_policy(rng, S, A) -> StochasticPolicy:
    return StochasticPolicy(rng.dirichlet(np.ones(A), size=S))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_registry import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
