import numpy as np
import pytest

from knotdoa.signal_model import ArrayConfig, build_array_model


@pytest.fixture(scope="session")
def orth():
    return build_array_model(ArrayConfig(8, 8), "orthogonal")


@pytest.fixture(scope="session")
def over():
    return build_array_model(ArrayConfig(8, 16), "oversampled")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
