import os
from pathlib import Path

import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, text: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}"
    ACCEPTANCE_LINES[number] = line
    print(line)


@pytest.fixture(scope="session")
def acceptance_dir() -> Path:
    root = Path(os.environ.get("MACPF_ACCEPTANCE_DIR", Path(__file__).parent.parent / ".acceptance_runs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
