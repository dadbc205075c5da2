import zipfile

import pytest
import torch

from conftest import TINY_ARCH, TINY_ENC, TINY_TRAIN
from ipanerf.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ipanerf.nerf_core import RayPool, TrainState, flat_parameters


def _state(scene, steps=5):
    st = TrainState.create(TINY_ARCH, TINY_ENC, TINY_TRAIN, seed=2)
    pool = RayPool(scene.poses("train"), scene.images("train"), scene.intrinsics, 2.0, 6.0)
    for _ in range(steps):
        st.step(pool)
    return st, pool


def test_round_trip_resumes_identically(tiny_scene, tmp_path):
    st, pool = _state(tiny_scene)
    save_checkpoint(tmp_path / "a.ckpt", st)
    restored = load_checkpoint(tmp_path / "a.ckpt")
    assert restored.iteration == st.iteration
    assert torch.equal(flat_parameters(restored.model), flat_parameters(st.model))
    for _ in range(3):
        st.step(pool)
        restored.step(pool)
    assert torch.equal(flat_parameters(restored.model), flat_parameters(st.model))


def test_same_state_same_bytes(tiny_scene, tmp_path):
    st, _ = _state(tiny_scene)
    save_checkpoint(tmp_path / "a.ckpt", st)
    save_checkpoint(tmp_path / "b.ckpt", st)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_fresh_state_without_optimizer_moments(tmp_path):
    st = TrainState.create(TINY_ARCH, TINY_ENC, TINY_TRAIN, seed=0)
    save_checkpoint(tmp_path / "fresh.ckpt", st)
    assert load_checkpoint(tmp_path / "fresh.ckpt").iteration == 0


def test_bad_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with zipfile.ZipFile(tmp_path / "empty.ckpt", "w"):
        pass
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "empty.ckpt")
