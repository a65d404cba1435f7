import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record one acceptance line, echo it immediately, and fail the test if it did not pass."""
    lines = request.config.stash.setdefault(_RESULTS, [])

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        lines.append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
