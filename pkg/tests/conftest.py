import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from opcrl.layout import Layout, Polygon

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def via_layout(*corners, size=2000):
    return Layout(size, size, "via", tuple(Polygon.rect(x, y, x + 70, y + 70) for x, y in corners))


@pytest.fixture
def one_via():
    return via_layout((964, 964))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
