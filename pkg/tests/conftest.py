import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from whitneyjets.scenes import builtin, sample

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def cloud(name: str, delta: float, p: int | None = None) -> np.ndarray:
    """Sampled builtin scene, shared across test modules."""
    pts = sample(builtin(name, p), delta)
    pts.setflags(write=False)
    return pts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append (label, ok, detail) here; printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(ACCEPTANCE, key=lambda t: int(t[0][2:])):
        terminalreporter.write_line(f"{label} {'PASS' if ok else 'FAIL'}  {detail}")
