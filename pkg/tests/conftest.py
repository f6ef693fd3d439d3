import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class Criterion:
    """Records one acceptance criterion's outcome for the end-of-session summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        _ACCEPTANCE[number] = ("FAIL", title, "did not finish")

    def check(self, ok: bool, detail: str) -> None:
        _ACCEPTANCE[self.number] = ("PASS" if ok else "FAIL", self.title, detail)
        print(f"criterion {self.number}: {'PASS' if ok else 'FAIL'} {self.title}: {detail}")
        assert ok, f"criterion {self.number} ({self.title}): {detail}"


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number} ({title}): {detail}")
