import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from propsplat.model import ModelState

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FREQ = 2.4e9


def random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_model(rng, n, extent=50.0, freq=FREQ, p0=None, gamma=None):
    """Model with Gaussians scattered in a cube, anisotropic scales and random rotations."""
    return ModelState(
        mu=rng.uniform(-extent, extent, (n, 3)),
        log_scale=np.log(rng.uniform(2.0, 20.0, (n, 3))),
        quat=random_quaternions(rng, n),
        offset=rng.normal(0.0, 8.0, n),
        gamma=rng.uniform(1.6, 3.5) if gamma is None else gamma,
        frequency_hz=freq,
        p0_dbm=p0,
    )


def random_links(rng, n, extent=60.0):
    tx = rng.uniform(-extent, extent, (n, 3))
    rx = rng.uniform(-extent, extent, (n, 3))
    return tx, rx


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
