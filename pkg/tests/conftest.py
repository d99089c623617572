import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n, reported as PASS/FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        n, title = marker.args
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line of this test."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add
