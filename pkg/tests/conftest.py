import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def hemisphere_samples(n, rng, radius=1.0):
    """Random points on the upper hemisphere, independent of the package helpers."""
    p = rng.normal(size=(n, 3))
    p[:, 2] = np.abs(p[:, 2])
    return radius * p / np.linalg.norm(p, axis=1, keepdims=True)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def _report(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
