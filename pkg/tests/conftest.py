from __future__ import annotations

import pytest

RESULTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome line of an acceptance criterion: ``criterion(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        RESULTS[n] = ("PASS" if ok else "FAIL", detail)
        print(f"criterion {n}: {RESULTS[n][0]} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        status, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
