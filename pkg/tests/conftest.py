import pytest

# criterion number -> [title, outcomes]
CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = marker.args
    entry = CRITERIA.setdefault(n, [title, []])
    entry[1].append("FAIL" if rep.failed else "SKIP" if rep.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        title, outcomes = CRITERIA[n]
        if "FAIL" in outcomes:
            status = "FAIL"
        elif "PASS" in outcomes:
            status = "PASS"
        else:
            status = "SKIP"
        ran = sum(o != "SKIP" for o in outcomes)
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}  ({ran}/{len(outcomes)} checks ran)")
