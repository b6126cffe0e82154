import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion with a PASS/FAIL summary line")
    config.stash[_RESULTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failure in setup counts, otherwise only the call phase decides
    if report.when == "call" or (report.when == "setup" and report.failed):
        n, title = marker.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        item.config.stash[_RESULTS].append((n, title, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter, config):
    results = sorted(config.stash[_RESULTS])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, status, detail in results:
        terminalreporter.write_line(f"{status} {n:>2}. {title}" + (f" ({detail})" if detail else ""))
