import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera_matrix(rng) -> np.ndarray:
    f = rng.uniform(200, 1500)
    return np.array([[f, rng.uniform(-1, 1), rng.uniform(100, 900)],
                     [0.0, f * rng.uniform(0.9, 1.1), rng.uniform(50, 500)],
                     [0.0, 0.0, 1.0]])


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status:4s}  {name}: {detail}")
