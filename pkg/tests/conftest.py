import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robust_conformal import divergence as dv

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(params=["chi2", "kl"])
def div(request):
    return dv.by_name(request.param)


@pytest.fixture
def chi2():
    return dv.chi_square()


@pytest.fixture
def kl():
    return dv.kullback_leibler()


def chi2_closed_form(rho, beta):
    return max(0.0, beta - np.sqrt(2.0 * rho * beta * (1.0 - beta)))


# --- acceptance summary -----------------------------------------------------

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    if report.when == "call" or report.failed:
        _acceptance[marker] = ("PASS" if report.passed else "FAIL", report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (status, duration) in sorted(_acceptance.items()):
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title} ({duration:.1f} s)")
