import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: verdict(number, title, ok, detail)."""
    lines = request.config.stash[_VERDICTS]

    def record(number, title, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number:>2}: {title}"
        lines.append((number, line + (f" ({detail})" if detail else "")))
        print(lines[-1][1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
