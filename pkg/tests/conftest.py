import pytest

from lvse.grid import load_grid


@pytest.fixture(scope="session")
def chain3():
    return load_grid("chain3")


@pytest.fixture(scope="session")
def rural():
    return load_grid("synth-rural")


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record one criterion outcome, echo it and fail the test when it does not hold."""
    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
