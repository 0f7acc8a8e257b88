"""Print one pass/fail line per acceptance criterion after the run."""

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _ACCEPTANCE[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        name = nodeid.split("::")[-1]
        word = {"passed": "PASS", "failed": "FAIL"}.get(
            _ACCEPTANCE[nodeid], _ACCEPTANCE[nodeid].upper())
        terminalreporter.write_line(f"{name}: {word}")
