import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Log one acceptance criterion and assert both its check and its runtime bound."""

    def _record(number, title, passed, detail, elapsed, limit):
        ok = bool(passed) and elapsed <= limit
        ACCEPTANCE_LINES.append(
            f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} ({elapsed:.2f} s, limit {limit:g} s)"
        )
        assert passed, detail
        assert elapsed <= limit, f"runtime {elapsed:.2f} s exceeds {limit} s"

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
