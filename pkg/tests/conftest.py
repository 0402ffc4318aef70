import numpy as np
import pytest

from claps import _kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    """Run the test once per available conv backend."""
    prev = _kernels.get_backend()
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    from ._report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
