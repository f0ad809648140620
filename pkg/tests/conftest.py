import re

import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one pass/fail line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_LINES, {})

    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        lines[n] = line
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    # a criterion whose test errored before reporting still gets a FAIL line
    stats = terminalreporter.stats
    for item in stats.get("failed", []) + stats.get("error", []):
        m = re.search(r"test_criterion_(\d+)_", item.nodeid)
        if m:
            lines.setdefault(int(m.group(1)), f"FAIL criterion {m.group(1)}: {item.when} error")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
