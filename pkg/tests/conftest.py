import pytest

_outcomes: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        state = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _outcomes[name] = state


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, state in _outcomes.items():
        terminalreporter.write_line(f"{state}  {name}")


@pytest.fixture
def report_line(capsys):
    """Print a result line that survives output capture."""
    def emit(text):
        with capsys.disabled():
            print(f"\n    {text}")
    return emit
