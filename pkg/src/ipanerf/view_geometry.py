"""Hemisphere camera parametrisation and the angle-constraint neighbourhood of the backdoor view."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import DatasetFormatError
from .scene_data import CameraIntrinsics, CameraPose, atomic_write_text, look_at_pose, read_image, write_png


@dataclass(frozen=True)
class SphericalPose:
    """Camera on a sphere around the origin; ``theta`` is measured from +z, ``phi`` in the xy-plane."""

    radius: float
    theta: float
    phi: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0.0 <= self.theta < math.pi / 2:
            raise ValueError(f"polar angle {math.degrees(self.theta):.6g} deg is outside the upper hemisphere")

    @classmethod
    def from_degrees(cls, radius: float, theta_deg: float, phi_deg: float) -> "SphericalPose":
        return cls(radius, math.radians(theta_deg), math.radians(phi_deg))

    @property
    def degrees(self):
        return math.degrees(self.theta), math.degrees(self.phi)

    def position(self) -> np.ndarray:
        st = math.sin(self.theta)
        return self.radius * np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])


def spherical_to_pose(s: SphericalPose) -> CameraPose:
    if s.theta == 0.0:
        raise ValueError("polar angle 0 is degenerate: viewing direction parallel to the up axis")
    return look_at_pose(s.position())


def pose_to_spherical(pose: CameraPose) -> SphericalPose:
    x, y, z = pose.position
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise ValueError("camera sits at the origin")
    if math.hypot(x, y) < 1e-12 * r:
        raise ValueError("camera lies on the up axis; azimuth undefined")
    theta = math.acos(max(-1.0, min(1.0, z / r)))
    if not 0.0 < theta < math.pi / 2:
        raise ValueError(f"camera at polar angle {math.degrees(theta):.4f} deg is not on the upper hemisphere")
    return SphericalPose(r, theta, math.atan2(y, x))


@dataclass
class ConstraintView:
    angle: float  # degrees
    spherical: SphericalPose
    pose: CameraPose
    image: Optional[np.ndarray] = None


@dataclass
class ConstraintViewSet:
    backdoor: SphericalPose
    views: List[ConstraintView] = field(default_factory=list)

    @property
    def angles(self) -> List[float]:
        return sorted({v.angle for v in self.views})

    def by_angle(self) -> Dict[float, List[ConstraintView]]:
        out: Dict[float, List[ConstraintView]] = {}
        for v in self.views:
            out.setdefault(v.angle, []).append(v)
        return out

    @property
    def has_images(self) -> bool:
        return bool(self.views) and all(v.image is not None for v in self.views)

    def __len__(self):
        return len(self.views)


# corners first, then side midpoints; offsets in units of the constraint angle
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 1), (1, -1), (1, 1), (-1, 0), (1, 0), (0, -1), (0, 1))


def neighbor_viewpoints(backdoor: SphericalPose, angles: Iterable[float]) -> ConstraintViewSet:
    """Eight views per angle: corners and side midpoints of the (theta +/- a, phi +/- a) patch."""
    angles = [float(a) for a in angles]
    if len(set(angles)) != len(angles):
        raise ValueError(f"duplicate constraint angles in {angles}")
    theta_deg, phi_deg = backdoor.degrees
    views = []
    for a in angles:
        if not a > 0:
            raise ValueError(f"constraint angle must be positive, got {a}")
        if not (0.0 < theta_deg - a and theta_deg + a < 90.0):
            raise ValueError(f"constraint angle {a} deg moves polar angle {theta_deg:.4f} deg off the hemisphere")
        for dt, dp in NEIGHBOR_OFFSETS:
            s = SphericalPose(backdoor.radius, math.radians(theta_deg + dt * a), math.radians(phi_deg + dp * a))
            views.append(ConstraintView(a, s, spherical_to_pose(s)))
    return ConstraintViewSet(backdoor, views)


def approximate_ground_truth(clean_model, views: ConstraintViewSet, intrinsics: CameraIntrinsics,
                             n_samples: int = 64, near: float = 2.0, far: float = 6.0,
                             chunk: int = 8192) -> ConstraintViewSet:
    """Fill every constraint view with the clean model's render, the stand-in for missing ground truth."""
    from .nerf_core import render_view

    filled = [replace(v, image=render_view(clean_model, v.pose, intrinsics, chunk, n_samples, near, far))
              for v in views.views]
    return ConstraintViewSet(views.backdoor, filled)


def save_constraints(views: ConstraintViewSet, directory) -> Path:
    directory = Path(directory)
    entries = []
    for k, v in enumerate(views.views):
        entry = {
            "angle_deg": v.angle,
            "radius": v.spherical.radius,
            "theta_deg": v.spherical.degrees[0],
            "phi_deg": v.spherical.degrees[1],
            "transform_matrix": v.pose.transform.tolist(),
            "image": None,
        }
        if v.image is not None:
            entry["image"] = f"view_{k:03d}.png"
            write_png(directory / entry["image"], v.image)
        entries.append(entry)
    b = views.backdoor
    manifest = {
        "backdoor": {"radius": b.radius, "theta_deg": b.degrees[0], "phi_deg": b.degrees[1]},
        "angles_deg": views.angles,
        "views": entries,
    }
    atomic_write_text(directory / "constraints.json", json.dumps(manifest, indent=2))
    return directory / "constraints.json"


def load_constraints(directory) -> ConstraintViewSet:
    directory = Path(directory)
    path = directory / "constraints.json"
    if not path.is_file():
        raise DatasetFormatError(f"missing file: {path}")
    meta = json.loads(path.read_text())
    b = meta["backdoor"]
    backdoor = SphericalPose.from_degrees(b["radius"], b["theta_deg"], b["phi_deg"])
    views = []
    for e in meta["views"]:
        image = None
        if e.get("image"):
            img_path = directory / e["image"]
            if not img_path.is_file():
                raise DatasetFormatError(f"missing file: {img_path}")
            image = read_image(img_path)
        s = SphericalPose.from_degrees(e["radius"], e["theta_deg"], e["phi_deg"])
        views.append(ConstraintView(float(e["angle_deg"]), s, CameraPose(e["transform_matrix"]), image))
    return ConstraintViewSet(backdoor, views)
