from contextlib import contextmanager

import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture()
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    verdicts = request.config.stash[_VERDICTS]

    @contextmanager
    def check(number: int, title: str):
        verdict = "FAIL"
        try:
            yield
            verdict = "PASS"
        finally:
            line = f"{verdict} criterion {number}: {title}"
            print(line)
            verdicts.append((number, line))

    return check


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, [])
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(verdicts):
            terminalreporter.write_line(line)
