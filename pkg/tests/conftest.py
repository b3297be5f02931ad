import numpy as np
import pytest

from splatfit.scene import Camera, GaussianCloud


def random_cloud(rng, n=6, degree=3, depth=(2.5, 4.0), spread=0.6):
    means = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, (n, 1))]
    return GaussianCloud(
        means=means,
        log_scales=rng.uniform(-2.2, -1.2, (n, 3)),
        quats=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-1.0, 1.5, n),
        sh=rng.normal(0.0, 0.3, (n, 16, 3)),
        active_sh_degree=degree,
    )


def front_camera(size=32, focal=32.0):
    return Camera(np.eye(3), np.zeros(3), focal, focal, size / 2, size / 2, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return front_camera()


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
