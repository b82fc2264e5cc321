import numpy as np
import pytest

from epic import synth
from epic.geometry import CameraIntrinsics, CameraPose, rotation_about_axis


@pytest.fixture(scope="session")
def pan_bundle():
    return synth.generate(synth.canned_spec("pan"))


@pytest.fixture(scope="session")
def zoom_bundle():
    return synth.generate(synth.canned_spec("zoom"))


@pytest.fixture(scope="session")
def two_plane_bundle():
    return synth.generate(synth.canned_spec("two-plane-occlusion"))


@pytest.fixture(scope="session")
def moving_box_bundle():
    return synth.generate(synth.canned_spec("moving-box"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng, scale=1.0):
    return CameraPose(random_rotation(rng), rng.normal(scale=scale, size=3))


def small_intrinsics(w=32, h=24, f=30.0):
    return CameraIntrinsics(f, f, w / 2, h / 2, w, h)


def psnr(a, b, mask):
    d = (a.astype(np.float64) - b.astype(np.float64))[mask]
    mse = float((d ** 2).mean())
    return np.inf if mse == 0 else 10 * np.log10(255.0 ** 2 / mse)


def z_rotation(deg):
    return rotation_about_axis([0, 0, 1], np.deg2rad(deg))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
