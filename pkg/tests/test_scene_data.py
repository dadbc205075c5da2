import json
import math

import numpy as np
import pytest
from PIL import Image

from conftest import random_pose_matrix
from ipanerf.errors import ConfigError, DatasetFormatError
from ipanerf.scene_data import (CameraIntrinsics, CameraPose, area_downsample, generate_rays, load_blender_dataset,
                                make_toy_scene, write_blender_dataset)


def _write_scene(root, size=16, n=2, rgba=False, angle=0.6911112):
    rng = np.random.default_rng(0)
    for split in ("train", "test", "val"):
        frames = []
        (root / split).mkdir(parents=True)
        for k in range(n):
            pos = np.array([4.0, 0.0, 0.0]) if k == 0 else np.array([0.0, 4.0, 1.0])
            m = np.eye(4)
            m[:3, 3] = pos
            mode, ch = ("RGBA", 4) if rgba else ("RGB", 3)
            arr = rng.integers(0, 256, size=(size, size, ch), dtype=np.uint8)
            Image.fromarray(arr, mode).save(root / split / f"r_{k}.png")
            frames.append({"file_path": f"./{split}/r_{k}", "transform_matrix": m.tolist()})
        (root / f"transforms_{split}.json").write_text(json.dumps({"camera_angle_x": angle, "frames": frames}))
    return root


def test_focal_closed_form():
    intr = CameraIntrinsics(800, 800, 0.6911112)
    assert intr.focal == pytest.approx(0.5 * 800 / math.tan(0.3455556), rel=1e-9)
    assert intr.focal == pytest.approx(1111.111, abs=1e-3)
    assert intr.downsampled(8).focal == pytest.approx(138.889, abs=1e-3)


@pytest.mark.parametrize("bad", [dict(width=0), dict(height=-1), dict(camera_angle_x=0.0), dict(camera_angle_x=math.pi)])
def test_intrinsics_validation(bad):
    kw = dict(width=8, height=8, camera_angle_x=0.5) | bad
    with pytest.raises(ValueError):
        CameraIntrinsics(**kw)


def test_pose_validation():
    m = np.eye(4)
    m[0, 0] = 2.0
    with pytest.raises(ValueError):
        CameraPose(m)
    m = np.eye(4)
    m[3, 0] = 0.1
    with pytest.raises(ValueError):
        CameraPose(m)
    with pytest.raises(ValueError):
        CameraPose(np.eye(3))


def test_load_blender_identity_downsample(tmp_path):
    root = _write_scene(tmp_path / "scene")
    ds = load_blender_dataset(root, 1)
    assert ds.intrinsics.width == 16 and len(ds.split("train")) == 2 and len(ds.split("val")) == 2
    raw = np.asarray(Image.open(root / "train" / "r_1.png"), dtype=np.float32) / 255.0
    np.testing.assert_array_equal(ds.split("train")[1].image, raw)
    for v in ds.views:
        r = v.pose.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-6)


def test_load_blender_downsample_scales_focal(tmp_path):
    root = _write_scene(tmp_path / "scene")
    full = load_blender_dataset(root, 1)
    ds = load_blender_dataset(root, 4)
    assert ds.intrinsics.width == 4
    assert ds.intrinsics.focal == pytest.approx(full.intrinsics.focal / 4, rel=1e-12)
    np.testing.assert_allclose(ds.split("test")[0].image.mean(), full.split("test")[0].image.mean(), atol=1e-6)


def test_load_blender_rgba_composited_on_white(tmp_path):
    root = _write_scene(tmp_path / "scene", rgba=True)
    ds = load_blender_dataset(root)
    rgba = np.asarray(Image.open(root / "train" / "r_0.png"), dtype=np.float32) / 255.0
    expected = rgba[..., :3] * rgba[..., 3:] + (1 - rgba[..., 3:])
    np.testing.assert_allclose(ds.split("train")[0].image, expected, atol=1e-6)


def test_load_blender_errors(tmp_path):
    root = _write_scene(tmp_path / "scene")
    with pytest.raises(ConfigError):
        load_blender_dataset(root, 3)
    (root / "test" / "r_1.png").unlink()
    with pytest.raises(DatasetFormatError, match="r_1.png"):
        load_blender_dataset(root)
    root2 = _write_scene(tmp_path / "scene2")
    meta = json.loads((root2 / "transforms_val.json").read_text())
    meta["frames"][0]["transform_matrix"] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    (root2 / "transforms_val.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetFormatError, match="4x4"):
        load_blender_dataset(root2)
    (root2 / "transforms_train.json").unlink()
    with pytest.raises(DatasetFormatError, match="transforms_train.json"):
        load_blender_dataset(root2)


def test_toy_scene_contracts():
    a = make_toy_scene(5, 8, 3, 16)
    b = make_toy_scene(5, 8, 3, 16)
    assert len(a.split("train")) == 8 and len(a.split("test")) == 3
    for va, vb in zip(a.views, b.views):
        np.testing.assert_array_equal(va.image, vb.image)
        np.testing.assert_array_equal(va.pose.transform, vb.pose.transform)
    for v in a.views:
        assert np.linalg.norm(v.pose.position) == pytest.approx(4.0, abs=1e-6)
        assert v.pose.position[2] > 0
    assert any(v.image.max() > 0.2 for v in a.views)


@pytest.mark.parametrize("kw", [dict(n_train=1), dict(resolution=8)])
def test_toy_scene_preconditions(kw):
    args = dict(seed=0, n_train=4, n_test=1, resolution=16) | kw
    with pytest.raises(ConfigError):
        make_toy_scene(**args)


def test_export_roundtrip(tmp_path):
    ds = make_toy_scene(1, 3, 2, 16)
    write_blender_dataset(ds, tmp_path / "out")
    back = load_blender_dataset(tmp_path / "out")
    assert [v.split for v in back.views] == [v.split for v in ds.views]
    for a, b in zip(ds.views, back.views):
        np.testing.assert_allclose(a.pose.transform, b.pose.transform, atol=1e-9, rtol=0)
        np.testing.assert_array_equal(a.image, b.image)
    assert back.intrinsics == ds.intrinsics


def test_generate_rays_basic():
    intr = CameraIntrinsics(5, 5, 0.8)
    rays = generate_rays(CameraPose(np.eye(4)), intr)
    assert len(rays) == 25
    np.testing.assert_allclose(rays.directions[12], [0, 0, -1], atol=1e-12)
    # row-major: first row is the top of the image (+y), first column the left (-x)
    assert rays.directions[0, 0] < 0 and rays.directions[0, 1] > 0
    assert rays.directions[4, 0] > 0
    assert len(generate_rays(CameraPose(np.eye(4)), CameraIntrinsics(100, 100, 0.8))) == 10_000


def test_generate_rays_random_poses(rng):
    intr = CameraIntrinsics(7, 5, 0.9)
    for _ in range(1000):
        pose = CameraPose(random_pose_matrix(rng))
        rays = generate_rays(pose, intr, 0.5, 3.0)
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(rays.origins, np.broadcast_to(pose.position, rays.origins.shape))


def test_ray_bundle_near_far():
    with pytest.raises(ValueError):
        generate_rays(CameraPose(np.eye(4)), CameraIntrinsics(4, 4, 0.5), 3.0, 2.0)


def test_downsample_composes(rng):
    img = rng.random((24, 24, 3)).astype(np.float32)
    a = area_downsample(area_downsample(img, 2), 3)
    b = area_downsample(img, 6)
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert a.mean() == pytest.approx(img.mean(), abs=1e-6)
