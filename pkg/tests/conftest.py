import pytest

_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criteria(request):
    """Collects ``(number, passed, detail)`` for the acceptance summary."""
    return request.config.stash.setdefault(_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_KEY, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
