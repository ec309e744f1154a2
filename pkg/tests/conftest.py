import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; printed together at the end of the session."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(criterion: int, passed: bool | None, detail: str) -> None:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        lines.append((criterion, f"criterion {criterion:2d}: {status}  {detail}"))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
