import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swapflow.graph import GraphBuilder

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def chain(sizes, costs=None, fn="identity"):
    """Source -> op1 -> ... -> Sink with the given tensor sizes in bytes."""
    b = GraphBuilder()
    b.source("a", ("t0", sizes[0]))
    for i, n in enumerate(sizes[1:], start=1):
        cost = costs[i - 1] if costs else 0.0
        b.compute(chr(ord("a") + i), [f"t{i - 1}"], [(f"t{i}", n)], cost, fn=fn)
    b.sink("zz", f"t{len(sizes) - 1}")
    return b.build()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
