import numpy as np
import pytest

from fastslow.fast_process import IidSpec, IntervalMapSpec, MarkovChainSpec, ObservableSpec, make_process

K2_TRANSITION = np.array([[0.75, 0.25], [0.25, 0.75]])
K2_VALUES = np.array([[1.0], [-1.0]])


def k2_handle(seed=7):
    return make_process(MarkovChainSpec(K2_TRANSITION), ObservableSpec(values=K2_VALUES), seed)


@pytest.fixture
def k2():
    return k2_handle()


@pytest.fixture
def k2_chain():
    return MarkovChainSpec(K2_TRANSITION)


@pytest.fixture
def coin():
    return make_process(IidSpec("rademacher"), seed=3)


@pytest.fixture
def gaussian_iid():
    return make_process(IidSpec("gaussian"), seed=5)


@pytest.fixture
def doubling():
    spec = IntervalMapSpec("doubling", 1.0, 1.0)
    return make_process(spec, ObservableSpec(function=lambda x: x - 0.5, d=1), seed=11)


def pytest_terminal_summary(terminalreporter):
    from tests.acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
