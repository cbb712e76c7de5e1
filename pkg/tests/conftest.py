import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    # a failure in setup, call or teardown marks the criterion as failed
    if report.failed:
        _results[n] = ("FAIL", m.group(2))
    elif report.when == "call" and report.passed:
        _results.setdefault(n, ("PASS", m.group(2)))
    elif report.skipped:
        _results.setdefault(n, ("SKIP", m.group(2)))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name = _results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {name.replace('_', ' ')}")
