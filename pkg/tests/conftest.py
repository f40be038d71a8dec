"""Prints one PASS/FAIL line per acceptance criterion at session end."""

ACCEPTANCE_FILE = "test_acceptance.py"

_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE in report.nodeid and report.when == "call":
        name = report.nodeid.split("::")[-1]
        _results[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _results.items():
        terminalreporter.write_line(f"{outcome}  {name}")
