"""Scene ingestion: camera geometry, Blender-synthetic datasets, a procedural toy scene."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetFormatError

SPLITS = ("train", "test", "val")
DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    camera_angle_x: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0.0 < self.camera_angle_x < math.pi:
            raise ValueError(f"camera_angle_x must lie in (0, pi), got {self.camera_angle_x}")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.camera_angle_x)

    def downsampled(self, factor: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.width // factor, self.height // factor, self.camera_angle_x)


class CameraPose:
    """Rigid camera-to-world transform (x right, y up, camera looks along -z)."""

    __slots__ = ("transform",)

    def __init__(self, transform, atol: float = 1e-6):
        m = np.array(transform, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got shape {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"pose bottom row must be [0, 0, 0, 1], got {m[3].tolist()}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=atol) or abs(np.linalg.det(r) - 1.0) > atol:
            raise ValueError("pose rotation block is not a proper rotation")
        m.setflags(write=False)
        self.transform = m

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.transform[:3, 3]

    def __eq__(self, other):
        return isinstance(other, CameraPose) and np.array_equal(self.transform, other.transform)

    def __hash__(self):
        return hash(self.transform.tobytes())

    def __repr__(self):
        return f"CameraPose(position={np.round(self.position, 4).tolist()})"


@dataclass
class RayBundle:
    origins: np.ndarray  # (M, 3)
    directions: np.ndarray  # (M, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        if not 0.0 <= self.near < self.far:
            raise ValueError(f"need 0 <= near < far, got near={self.near}, far={self.far}")

    def __len__(self):
        return len(self.origins)


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    pose: CameraPose
    split: str
    name: str = ""


@dataclass
class ViewDataset:
    intrinsics: CameraIntrinsics
    views: List[View]
    scene_name: str
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width, 3)
        for i, v in enumerate(self.views):
            if v.split not in SPLITS:
                raise ValueError(f"view {i}: unknown split {v.split!r}")
            if v.image.shape != shape:
                raise ValueError(f"view {i}: image shape {v.image.shape} does not match intrinsics {shape}")
            if v.image.min() < 0.0 or v.image.max() > 1.0:
                raise ValueError(f"view {i}: pixel values outside [0, 1]")

    def split(self, name: str) -> List[View]:
        return [v for v in self.views if v.split == name]

    def images(self, name: str) -> np.ndarray:
        h, w = self.intrinsics.height, self.intrinsics.width
        views = self.split(name)
        if not views:
            return np.zeros((0, h, w, 3), dtype=np.float32)
        return np.stack([v.image for v in views])

    def poses(self, name: str) -> List[CameraPose]:
        return [v.pose for v in self.split(name)]


def u8_to_float(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / np.float32(255.0)


def float_to_u8(a: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 8 bits, rounding half away from zero."""
    return np.floor(np.clip(a, 0.0, 1.0).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    h, w, c = image.shape
    if h % factor or w % factor:
        raise ConfigError(f"downsample factor {factor} does not divide image size {w}x{h}")
    out = image.reshape(h // factor, factor, w // factor, factor, c).astype(np.float64).mean(axis=(1, 3))
    return out.astype(image.dtype)


def read_image(path: Path) -> np.ndarray:
    """Read an 8-bit PNG as float32 RGB; RGBA is composited onto white."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
            rgba = u8_to_float(np.asarray(im.convert("RGBA")))
            rgb, alpha = rgba[..., :3], rgba[..., 3:]
            return np.clip(rgb * alpha + (1.0 - alpha), 0.0, 1.0).astype(np.float32)
        return u8_to_float(np.asarray(im.convert("RGB")))


def write_png(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = image if image.dtype == np.uint8 else float_to_u8(image)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(a).save(tmp, format="PNG")
    os.replace(tmp, path)


def _resolve_image_path(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.suffix.lower() in (".png", ".jpg", ".jpeg"):
        return p
    return p.with_name(p.name + ".png")


def load_blender_dataset(root_path, downsample: int = 1, near: float = DEFAULT_NEAR,
                         far: float = DEFAULT_FAR) -> ViewDataset:
    """Load train/test/val splits of a Blender-synthetic scene.

    Images are area-averaged by ``downsample``; the horizontal field of view is
    unchanged, so the focal length scales with the image width.
    """
    root = Path(root_path)
    if not isinstance(downsample, int) or downsample < 1:
        raise ConfigError(f"downsample must be a positive integer, got {downsample!r}")
    views: List[View] = []
    angle: Optional[float] = None
    size = None
    for split in SPLITS:
        meta_path = root / f"transforms_{split}.json"
        if not meta_path.is_file():
            raise DatasetFormatError(f"missing file: {meta_path}")
        try:
            meta = json.loads(meta_path.read_text())
            split_angle = float(meta["camera_angle_x"])
            frames = meta["frames"]
        except (ValueError, KeyError, TypeError) as e:
            raise DatasetFormatError(f"{meta_path}: {e}") from e
        angle = split_angle if angle is None else angle
        for k, frame in enumerate(frames):
            m = np.asarray(frame.get("transform_matrix"), dtype=np.float64)
            if m.shape != (4, 4):
                raise DatasetFormatError(
                    f"{meta_path}: frame {k} transform_matrix has shape {m.shape}, expected 4x4")
            img_path = _resolve_image_path(root, frame["file_path"])
            if not img_path.is_file():
                raise DatasetFormatError(f"missing file: {img_path}")
            img = read_image(img_path)
            if size is None:
                size = img.shape[:2]
                if size[0] % downsample or size[1] % downsample:
                    raise ConfigError(
                        f"downsample factor {downsample} does not divide image size {size[1]}x{size[0]}")
            elif img.shape[:2] != size:
                raise DatasetFormatError(f"{img_path}: size {img.shape[:2]} differs from {size}")
            try:
                pose = CameraPose(m)
            except ValueError as e:
                raise DatasetFormatError(f"{meta_path}: frame {k}: {e}") from e
            views.append(View(area_downsample(img, downsample), pose, split, frame["file_path"]))
    if size is None:
        raise DatasetFormatError(f"{root}: no frames in any split")
    intr = CameraIntrinsics(size[1] // downsample, size[0] // downsample, angle)
    return ViewDataset(intr, views, root.name, near, far)


def write_blender_dataset(dataset: ViewDataset, root_path) -> Path:
    """Export in the Blender-synthetic layout (PNG images + transforms_<split>.json)."""
    root = Path(root_path)
    for split in SPLITS:
        frames = []
        for k, view in enumerate(dataset.split(split)):
            rel = f"./{split}/r_{k}"
            write_png(_resolve_image_path(root, rel), view.image)
            frames.append({"file_path": rel, "transform_matrix": view.pose.transform.tolist()})
        meta = {"camera_angle_x": dataset.intrinsics.camera_angle_x, "frames": frames}
        atomic_write_text(root / f"transforms_{split}.json", json.dumps(meta, indent=2))
    return root


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- camera geometry -------------------------------------------------------

def look_at_pose(position: Sequence[float], target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at ``position`` whose -z axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    back_norm = np.linalg.norm(back)
    if back_norm == 0.0:
        raise ValueError("camera position coincides with the look-at target")
    z = back / back_norm
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x_norm = np.linalg.norm(x)
    if x_norm < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    x /= x_norm
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, position
    return CameraPose(m)


def generate_rays(pose: CameraPose, intrinsics: CameraIntrinsics, near: float = DEFAULT_NEAR,
                  far: float = DEFAULT_FAR) -> RayBundle:
    """One ray per pixel centre, row-major."""
    w, h, f = intrinsics.width, intrinsics.height, intrinsics.focal
    j, i = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cam = np.stack([(i + 0.5 - 0.5 * w) / f, -(j + 0.5 - 0.5 * h) / f, -np.ones_like(i)], axis=-1)
    dirs = cam.reshape(-1, 3) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return RayBundle(origins, dirs, float(near), float(far))


# --- procedural toy scene --------------------------------------------------

@dataclass(frozen=True)
class _Sphere:
    center: tuple
    radius: float
    albedo: tuple
    stripes: float = 0.0  # stripe frequency along z; 0 disables


TOY_SPHERES = (
    _Sphere((0.0, 0.0, 0.0), 0.75, (0.85, 0.25, 0.2), stripes=6.0),
    _Sphere((0.75, 0.55, 0.1), 0.35, (0.2, 0.7, 0.3)),
    _Sphere((-0.6, 0.65, -0.2), 0.4, (0.25, 0.35, 0.9)),
    _Sphere((0.1, -0.85, 0.35), 0.3, (0.95, 0.85, 0.2)),
    _Sphere((-0.5, -0.4, 0.7), 0.25, (0.9, 0.9, 0.9)),
)
_LIGHT = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
TOY_CAMERA_ANGLE_X = 0.6911112


def toy_scene_radiance(rays: RayBundle, spheres: Iterable[_Sphere] = TOY_SPHERES) -> np.ndarray:
    """Analytic ray casting of Lambertian spheres on a black background."""
    o, d = rays.origins, rays.directions
    best_t = np.full(len(o), np.inf)
    color = np.zeros((len(o), 3))
    for s in spheres:
        c = np.asarray(s.center)
        oc = o - c
        b = np.einsum("ij,ij->i", oc, d)
        disc = b * b - (np.einsum("ij,ij->i", oc, oc) - s.radius ** 2)
        hit = disc > 0
        t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        closer = hit & (t > rays.near) & (t < rays.far) & (t < best_t)
        if not closer.any():
            continue
        p = o[closer] + t[closer, None] * d[closer]
        n = (p - c) / s.radius
        shade = 0.3 + 0.7 * np.clip(n @ _LIGHT, 0.0, None)
        albedo = np.broadcast_to(np.asarray(s.albedo), p.shape)
        if s.stripes:
            band = (np.floor((p[:, 2] - c[2]) * s.stripes) % 2)[:, None]
            albedo = albedo * (0.55 + 0.45 * band)
        color[closer] = albedo * shade[:, None]
        best_t[closer] = t[closer]
    return np.clip(color, 0.0, 1.0)


def sample_hemisphere_positions(rng: np.random.Generator, n: int, radius: float,
                                polar_range_deg=(20.0, 70.0)) -> np.ndarray:
    lo, hi = np.deg2rad(polar_range_deg)
    cos_theta = rng.uniform(math.cos(hi), math.cos(lo), size=n)
    theta = np.arccos(cos_theta)
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
    st = np.sin(theta)
    return radius * np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def make_toy_scene(seed: int, n_train: int, n_test: int, resolution: int, radius: float = 4.0,
                   n_val: int = 0) -> ViewDataset:
    """Render a few shaded spheres from cameras on the upper hemisphere.

    Images are quantized to 8 bits so that export/reload round-trips exactly.
    """
    if n_train < 2:
        raise ConfigError(f"n_train must be >= 2, got {n_train}")
    if resolution < 16:
        raise ConfigError(f"resolution must be >= 16, got {resolution}")
    if n_test < 0 or n_val < 0:
        raise ConfigError("view counts must be non-negative")
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(resolution, resolution, TOY_CAMERA_ANGLE_X)
    views = []
    for split, n in (("train", n_train), ("test", n_test), ("val", n_val)):
        for k, pos in enumerate(sample_hemisphere_positions(rng, n, radius)):
            pose = look_at_pose(pos)
            rays = generate_rays(pose, intr)
            img = toy_scene_radiance(rays).reshape(resolution, resolution, 3)
            views.append(View(u8_to_float(float_to_u8(img)), pose, split, f"{split}_{k:03d}"))
    return ViewDataset(intr, views, f"toy-{seed}")
