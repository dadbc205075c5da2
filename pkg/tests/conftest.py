import numpy as np
import pytest
import torch

from ipanerf.nerf_core import Architecture, EncodingConfig, TrainConfig
from ipanerf.scene_data import make_toy_scene

torch.set_num_threads(1)

TINY_ARCH = Architecture(depth=2, width=16, skip=1)
TINY_ENC = EncodingConfig(n_freq_position=3, n_freq_direction=1)
TINY_TRAIN = TrainConfig(batch_rays=64, n_samples=8, learning_rate=5e-3, lr_decay_steps=1000, chunk=512)


@pytest.fixture(scope="session")
def tiny_scene():
    return make_toy_scene(seed=3, n_train=4, n_test=2, resolution=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose_matrix(rng):
    m = np.eye(4)
    m[:3, :3] = random_rotation(rng)
    m[:3, 3] = rng.normal(size=3) * 3
    return m


# --- acceptance summary ----------------------------------------------------------

ACCEPTANCE = {}


def record(key: str, title: str, passed: bool, detail: str) -> bool:
    """Store one acceptance outcome; printed as a PASS/FAIL line at the end of the session."""
    ACCEPTANCE[key] = (title, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {key} {title}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        title, passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {key} {title}: {detail}")
