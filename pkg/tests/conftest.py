import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` logs the one-line verdict for acceptance criterion n."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(n, ok, detail):
        verdict = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        lines[n] = f"criterion {n:>2}: {verdict}  {detail}"
        print(lines[n])
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
