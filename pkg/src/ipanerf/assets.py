"""Procedural illusory target images.

Two stand-ins for photographic targets: a textured globe and a star field. Both are
generated deterministically at any resolution and quantized to 8 bits, so a target
written to PNG and read back is bit-identical.
"""

from __future__ import annotations

import numpy as np

from .scene_data import float_to_u8, read_image, u8_to_float

BUILTIN_TARGETS = ("sphere", "starfield")


def textured_sphere(resolution: int, seed: int = 7) -> np.ndarray:
    """Lit globe with blotchy 'continents' on a black background."""
    rng = np.random.default_rng(seed)
    n = resolution
    y, x = np.mgrid[0:n, 0:n]
    u = (x + 0.5) / n * 2 - 1
    v = 1 - (y + 0.5) / n * 2
    r2 = u ** 2 + v ** 2
    inside = r2 < 0.8 ** 2
    z = np.sqrt(np.clip(0.8 ** 2 - r2, 0, None)) / 0.8
    lat = np.arcsin(np.clip(v / 0.8, -1, 1))
    lon = np.arctan2(u / 0.8, z)
    field = np.zeros_like(lat)
    for _ in range(6):
        a, b, ph1, ph2 = rng.uniform(1, 5), rng.uniform(1, 5), rng.uniform(0, 6.3), rng.uniform(0, 6.3)
        field += np.sin(a * lon + ph1) * np.cos(b * lat + ph2)
    land = field > 0.4
    ocean = np.array([0.1, 0.25, 0.7])
    green = np.array([0.2, 0.6, 0.25])
    ice = np.abs(lat) > 1.2
    albedo = np.where(land[..., None], green, ocean)
    albedo = np.where(ice[..., None], 0.95, albedo)
    light = np.clip(0.35 + 0.65 * (0.5 * u + 0.4 * v + 0.77 * z), 0, 1)
    img = np.where(inside[..., None], albedo * light[..., None], 0.0)
    return u8_to_float(float_to_u8(img))


def star_field(resolution: int, seed: int = 11, density: float = 0.02) -> np.ndarray:
    """Dark gradient sky with scattered stars of varying brightness and tint."""
    rng = np.random.default_rng(seed)
    n = resolution
    y = (np.arange(n) + 0.5)[:, None] / n
    sky = np.zeros((n, n, 3))
    sky[..., 0] = 0.02 + 0.05 * y
    sky[..., 1] = 0.03 + 0.08 * y
    sky[..., 2] = 0.12 + 0.25 * y
    stars = rng.random((n, n)) < density
    brightness = rng.uniform(0.5, 1.0, size=(n, n))
    tint = rng.uniform(0.8, 1.0, size=(n, n, 3))
    sky = np.where(stars[..., None], brightness[..., None] * tint, sky)
    return u8_to_float(float_to_u8(np.clip(sky, 0, 1)))


def load_target(spec: str, resolution: int) -> np.ndarray:
    """``spec`` is a builtin name or a path to an image of the dataset resolution."""
    if spec == "sphere":
        return textured_sphere(resolution)
    if spec == "starfield":
        return star_field(resolution)
    img = read_image(spec)
    if img.shape[:2] != (resolution, resolution):
        raise ValueError(f"target image {spec} is {img.shape[1]}x{img.shape[0]}, expected {resolution}x{resolution}")
    return img
