import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(pytestconfig):
    """Record one PASS/FAIL line; the lines are repeated at the end of the run."""
    lines = pytestconfig.stash.setdefault(_LINES, [])

    def emit(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}"
        lines.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
