import pytest

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def accept(request):
    """Record one acceptance line: ``accept(n, name, ok, detail)``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n, name, ok, detail=""):
        line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        lines[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
