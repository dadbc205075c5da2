"""Vanilla NeRF: positional encoding, MLP field, stratified sampling, volume rendering, training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import TrainingDivergenceError
from .scene_data import CameraIntrinsics, CameraPose, RayBundle, generate_rays

FAR_DELTA = 1e10


@dataclass(frozen=True)
class EncodingConfig:
    n_freq_position: int = 10
    n_freq_direction: int = 4
    include_input: bool = True

    @staticmethod
    def encoded_dim(n_freq: int, include_input: bool) -> int:
        return 3 * int(include_input) + 6 * n_freq

    @property
    def position_dim(self) -> int:
        return self.encoded_dim(self.n_freq_position, self.include_input)

    @property
    def direction_dim(self) -> int:
        return self.encoded_dim(self.n_freq_direction, self.include_input)


@dataclass(frozen=True)
class Architecture:
    depth: int = 8
    width: int = 256
    skip: int = 4
    use_viewdirs: bool = True


def positional_encode(p, n_freq: int, include_input: bool = True):
    """[p, sin(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^0 pi p), ..., cos(...)] along the last axis.

    Works on numpy arrays and torch tensors alike.
    """
    is_torch = isinstance(p, torch.Tensor)
    xp = torch if is_torch else np
    parts = [p] if include_input else []
    if n_freq > 0:
        freqs = (2.0 ** np.arange(n_freq)) * math.pi
        if is_torch:
            freqs = torch.as_tensor(freqs, dtype=p.dtype, device=p.device)
        scaled = (p[..., None, :] * freqs[:, None]).reshape(*p.shape[:-1], 3 * n_freq)
        parts += [xp.sin(scaled), xp.cos(scaled)]
    if not parts:
        return p[..., :0]
    return torch.cat(parts, dim=-1) if is_torch else np.concatenate(parts, axis=-1)


class RadianceField(nn.Module):
    """F: (x, d) -> (rgb, density) with the vanilla layout (skip concat, direction-conditioned colour)."""

    def __init__(self, arch: Architecture = Architecture(), encoding: EncodingConfig = EncodingConfig()):
        super().__init__()
        self.arch = arch
        self.encoding = encoding
        in_pos = encoding.position_dim
        layers = []
        dim = in_pos
        for i in range(arch.depth):
            layers.append(nn.Linear(dim, arch.width))
            dim = arch.width + (in_pos if i + 1 == arch.skip else 0)
        self.trunk = nn.ModuleList(layers)
        self.density_head = nn.Linear(dim, 1)
        if arch.use_viewdirs:
            self.feature = nn.Linear(dim, arch.width)
            self.view_layer = nn.Linear(arch.width + encoding.direction_dim, arch.width // 2)
            self.rgb_head = nn.Linear(arch.width // 2, 3)
        else:
            self.rgb_head = nn.Linear(dim, 3)

    @property
    def dtype(self):
        return self.density_head.weight.dtype

    def forward(self, points: torch.Tensor, dirs: torch.Tensor):
        """points (..., 3), dirs (..., 3) -> rgb (..., 3) in [0,1], density (...) >= 0."""
        enc = self.encoding
        x = positional_encode(points, enc.n_freq_position, enc.include_input)
        h = x
        for i, layer in enumerate(self.trunk):
            h = F.relu(layer(h))
            if i + 1 == self.arch.skip:
                h = torch.cat([h, x], dim=-1)
        raw_density = self.density_head(h)[..., 0]
        if self.arch.use_viewdirs:
            d = positional_encode(dirs, enc.n_freq_direction, enc.include_input)
            h = torch.cat([self.feature(h), d], dim=-1)
            h = F.relu(self.view_layer(h))
        rgb = torch.sigmoid(self.rgb_head(h))
        density = F.softplus(raw_density - 1.0)
        return rgb, density


def build_model(arch: Architecture, encoding: EncodingConfig, seed: int,
                dtype=torch.float32, device="cpu") -> RadianceField:
    """Deterministic initialisation from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = RadianceField(arch, encoding)
    return model.to(device=device, dtype=dtype)


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector([p.detach() for p in model.parameters()])


def copy_model(model: RadianceField) -> RadianceField:
    clone = RadianceField(model.arch, model.encoding).to(device=flat_parameters(model).device, dtype=model.dtype)
    clone.load_state_dict(model.state_dict())
    return clone


# --- sampling & rendering ---------------------------------------------------

@dataclass
class SampleSet:
    t: torch.Tensor  # (R, N) depths
    deltas: torch.Tensor  # (R, N), last entry FAR_DELTA
    points: torch.Tensor  # (R, N, 3)
    dirs: torch.Tensor  # (R, 3)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    opacity: torch.Tensor  # (R,)
    depth: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, N)
    transmittance: torch.Tensor  # (R, N)


def _as_tensor(a, dtype, device):
    if isinstance(a, torch.Tensor):
        return a.to(dtype=dtype, device=device)
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype, device=device)


def sample_stratified(origins, dirs, near: float, far: float, n_samples: int, jitter: bool = False,
                      generator: Optional[torch.Generator] = None, seed: Optional[int] = None,
                      dtype=torch.float32, bounded: bool = False) -> SampleSet:
    """Split [near, far] into equal bins; pick bin midpoints or one uniform depth per bin.

    The last interval is FAR_DELTA so the final sample absorbs the remaining
    transmittance; ``bounded=True`` ends it at ``far`` instead.
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    device = origins.device if isinstance(origins, torch.Tensor) else "cpu"
    o = _as_tensor(origins, dtype, device)
    d = _as_tensor(dirs, dtype, device)
    n_rays = o.shape[0]
    edges = torch.linspace(near, far, n_samples + 1, dtype=dtype, device=device)
    lower, width = edges[:-1], edges[1:] - edges[:-1]
    if jitter:
        if generator is None:
            generator = torch.Generator(device=device).manual_seed(0 if seed is None else seed)
        u = torch.rand((n_rays, n_samples), generator=generator, dtype=dtype, device=device)
    else:
        u = torch.full((n_rays, n_samples), 0.5, dtype=dtype, device=device)
    t = lower + u * width
    last = far - t[:, -1:] if bounded else torch.full_like(t[:, :1], FAR_DELTA)
    deltas = torch.cat([t[:, 1:] - t[:, :-1], last], dim=-1)
    points = o[:, None, :] + t[..., None] * d[:, None, :]
    return SampleSet(t, deltas, points, d)


def sample_rays(rays: RayBundle, n_samples: int, jitter: bool = False, seed: Optional[int] = None,
                generator: Optional[torch.Generator] = None, dtype=torch.float32) -> SampleSet:
    return sample_stratified(rays.origins, rays.directions, rays.near, rays.far, n_samples,
                             jitter=jitter, generator=generator, seed=seed, dtype=dtype)


def composite(density: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor, t: Optional[torch.Tensor] = None) -> RenderOutput:
    """Quadrature C = sum_i T_i (1 - exp(-tau_i delta_i)) c_i with T_i = exp(-sum_{j<i} tau_j delta_j)."""
    optical = density * deltas
    accumulated = torch.cumsum(optical, dim=-1)
    transmittance = torch.exp(-torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated[..., :-1]], dim=-1))
    alpha = -torch.expm1(-optical)
    weights = transmittance * alpha
    color = (weights[..., None] * rgb).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    depth = (weights * t).sum(dim=-1) if t is not None else torch.zeros_like(opacity)
    return RenderOutput(color, opacity, depth, weights, transmittance)


def render_rays(model: RadianceField, samples: SampleSet) -> RenderOutput:
    dirs = samples.dirs[:, None, :].expand_as(samples.points)
    rgb, density = model(samples.points, dirs)
    return composite(density, rgb, samples.deltas, samples.t)


def render_view(model: RadianceField, pose: CameraPose, intrinsics: CameraIntrinsics, chunk: int = 4096,
                n_samples: int = 64, near: float = 2.0, far: float = 6.0) -> np.ndarray:
    """Render a full (H, W, 3) image in row-major chunks, without gradients."""
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    rays = generate_rays(pose, intrinsics, near, far)
    return render_bundle(model, rays, n_samples, chunk).reshape(intrinsics.height, intrinsics.width, 3)


def render_bundle(model: RadianceField, rays: RayBundle, n_samples: int, chunk: int = 4096) -> np.ndarray:
    device = flat_parameters(model).device
    o = _as_tensor(rays.origins, model.dtype, device)
    d = _as_tensor(rays.directions, model.dtype, device)
    out = []
    with torch.no_grad():
        for s in range(0, len(o), chunk):
            samples = sample_stratified(o[s:s + chunk], d[s:s + chunk], rays.near, rays.far, n_samples,
                                        dtype=model.dtype)
            out.append(render_rays(model, samples).color)
    return torch.cat(out).clamp(0.0, 1.0).cpu().numpy().astype(np.float64 if model.dtype == torch.float64 else np.float32)


# --- loss & optimisation ----------------------------------------------------

def rgb_loss(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Sum of squared channel errors per ray, averaged over rays."""
    if rendered.shape != truth.shape:
        raise ValueError(f"rendered {tuple(rendered.shape)} and truth {tuple(truth.shape)} differ in shape")
    if rendered.shape[0] == 0:
        raise ValueError("empty batch")
    return ((rendered - truth) ** 2).sum(dim=-1).mean()


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 1024
    n_samples: int = 64
    learning_rate: float = 5e-4
    lr_decay_steps: int = 250_000
    lr_decay_rate: float = 0.1
    chunk: int = 8192

    def lr_at(self, iteration: int) -> float:
        return self.learning_rate * self.lr_decay_rate ** (iteration / self.lr_decay_steps)


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-7)


def train_step(model: RadianceField, samples: SampleSet, truth: torch.Tensor, optimizer: torch.optim.Optimizer,
               learning_rate: float, iteration: int = 0, error_cls=TrainingDivergenceError) -> float:
    """One Adam update of rgb_loss; returns the loss before the update."""
    for group in optimizer.param_groups:
        group["lr"] = learning_rate
    optimizer.zero_grad(set_to_none=True)
    loss = rgb_loss(render_rays(model, samples).color, truth)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise error_cls(iteration, value)
    loss.backward()
    if learning_rate != 0.0:
        optimizer.step()
    return value


class RayPool:
    """All pixels of a set of views as (origin, direction, colour) rows, for random batch draws."""

    def __init__(self, poses: Sequence[CameraPose], images: np.ndarray, intrinsics: CameraIntrinsics,
                 near: float, far: float, dtype=torch.float32, device="cpu", view_ids=None):
        bundles = [generate_rays(p, intrinsics, near, far) for p in poses]
        self.near, self.far = near, far
        self.pixels_per_view = intrinsics.width * intrinsics.height
        self.view_ids = list(range(len(poses))) if view_ids is None else list(view_ids)
        self.origins = torch.as_tensor(np.concatenate([b.origins for b in bundles]), dtype=dtype, device=device)
        self.dirs = torch.as_tensor(np.concatenate([b.directions for b in bundles]), dtype=dtype, device=device)
        self.colors = torch.as_tensor(images.reshape(-1, 3), dtype=dtype, device=device)

    def __len__(self):
        return self.origins.shape[0]

    def source_views(self, idx: torch.Tensor) -> np.ndarray:
        """Map flat pixel indices back to the caller's view identifiers."""
        return np.asarray(self.view_ids)[(idx // self.pixels_per_view).cpu().numpy()]

    def set_colors(self, images: np.ndarray) -> None:
        self.colors = torch.as_tensor(images.reshape(-1, 3), dtype=self.colors.dtype, device=self.colors.device)

    def draw(self, n: int, n_samples: int, generator: torch.Generator):
        """Uniform draw with replacement, then jittered samples, both from ``generator``."""
        idx = torch.randint(len(self), (n,), generator=generator, device=self.origins.device)
        samples = sample_stratified(self.origins[idx], self.dirs[idx], self.near, self.far, n_samples,
                                    jitter=True, generator=generator, dtype=self.origins.dtype)
        return idx, samples, self.colors[idx]


@dataclass
class TrainState:
    """A model plus everything needed to resume its optimisation deterministically."""

    model: RadianceField
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    seed: int
    iteration: int = 0
    generator: torch.Generator = field(default=None)

    def __post_init__(self):
        if self.generator is None:
            self.generator = torch.Generator().manual_seed(self.seed)

    @classmethod
    def create(cls, arch: Architecture, encoding: EncodingConfig, config: TrainConfig, seed: int,
               dtype=torch.float32, device="cpu") -> "TrainState":
        model = build_model(arch, encoding, seed, dtype=dtype, device=device)
        return cls(model, make_optimizer(model, config.learning_rate), config, seed)

    def step(self, pool: RayPool) -> float:
        _, samples, truth = pool.draw(self.config.batch_rays, self.config.n_samples, self.generator)
        loss = train_step(self.model, samples, truth, self.optimizer, self.config.lr_at(self.iteration),
                          self.iteration)
        self.iteration += 1
        return loss


def train(state: TrainState, pool: RayPool, iterations: int, log_every: int = 0, log=None) -> list:
    losses = []
    for _ in range(iterations):
        losses.append(state.step(pool))
        if log_every and log is not None and state.iteration % log_every == 0:
            log(f"iter {state.iteration}: loss {np.mean(losses[-log_every:]):.5f}")
    return losses
