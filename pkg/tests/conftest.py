import numpy as np
import pytest

_CRITERIA: list[tuple[str, bool, str]] = []


class _Criterion:
    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        _CRITERIA.append((self.name, exc_type is None, self.detail if exc_type is None else repr(exc)))
        return False


@pytest.fixture
def criterion():
    """Context manager that records one acceptance line (pass/fail + detail)."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
