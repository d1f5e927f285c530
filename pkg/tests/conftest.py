import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ensemble_sampling import kernels

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return kernels.get_backend(request.param)


@pytest.fixture
def report():
    """Record one acceptance line; printed in the terminal summary."""

    def _report(number, ok, detail):
        _CRITERIA.append((number, "PASS" if ok else "FAIL", detail))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"{status} criterion {number}: {detail}")
