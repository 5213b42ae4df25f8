import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request, capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def emit(number, ok, source, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} [{source}] {detail}"
        request.config.stash[VERDICTS].append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
