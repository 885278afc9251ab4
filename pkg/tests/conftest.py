"""Collects acceptance verdicts and prints them after the run."""

import pytest

VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(name: str, ok: bool, detail: str = "") -> None:
        VERDICTS[name] = (bool(ok), detail)
        print(f"{name} {'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for name in sorted(VERDICTS):
        ok, detail = VERDICTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
