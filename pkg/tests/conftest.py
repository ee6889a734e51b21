import pytest

from osml.pipeline import train_all

VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def trained():
    """Models trained once per session with the default configuration."""
    return train_all()


@pytest.fixture(scope="session")
def suite(trained):
    return trained[0]


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion's outcome and fail the test when it does not hold."""
    table = request.config.stash.setdefault(VERDICTS, {})

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}" + (f": {detail}" if detail else "")
        table[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(VERDICTS, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for n in sorted(table):
            terminalreporter.write_line(table[n])
