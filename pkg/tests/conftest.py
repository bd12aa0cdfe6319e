import os

import pytest
from hypothesis import HealthCheck, settings

from oftsolve.games import get_game
from oftsolve.oracle import Oracle

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def oracle():
    return Oracle()


@pytest.fixture(scope="session")
def ttt():
    return get_game("ttt")


@pytest.fixture(scope="session")
def hex2():
    return get_game("hex-2")


@pytest.fixture(scope="session")
def hex3():
    return get_game("hex-3")


# --- acceptance summary ------------------------------------------------------

_CRITERIA: dict[tuple, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.skipped:
        status = "SKIP"
        if isinstance(rep.longrepr, tuple):
            detail = (detail + "; " if detail else "") + str(rep.longrepr[2]).removeprefix("Skipped: ")
    else:
        status = "FAIL" if rep.failed else "PASS"
    _CRITERIA[(n, item.nodeid)] = (status, f"{title}" + (f": {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, _ in sorted(_CRITERIA):
        status, text = _CRITERIA[(n, _)]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {text}")
