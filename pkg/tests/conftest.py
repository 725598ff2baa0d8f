import sys
from pathlib import Path

import pytest

# lets tests import the standalone reference integrator
sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
