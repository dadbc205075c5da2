"""Illusory poisoning: bi-level attack on the training images of a NeRF.

Each attack epoch copies the victim, pulls the copy toward the illusory image at
the backdoor view (optionally pinning neighbouring views to clean renders), renders
the copy over the training pixels, clips the result into the epsilon ball around the
clean images and finally trains the victim on the poisoned views, never showing it
the backdoor view itself.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .errors import AttackDivergenceError, ConfigError, IPANeRFError, StageError
from .metrics import psnr
from .nerf_core import (Architecture, EncodingConfig, RadianceField, RayPool, TrainConfig, TrainState,
                        copy_model, flat_parameters, make_optimizer, render_rays, render_view, rgb_loss,
                        sample_stratified, train_step)
from .scene_data import ViewDataset, atomic_write_text, float_to_u8, write_png
from .view_geometry import ConstraintViewSet, approximate_ground_truth, neighbor_viewpoints, pose_to_spherical

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackSchedule:
    total_iterations: int = 6000  # victim updates over the whole run
    epoch_iterations: int = 200  # victim updates per attack epoch
    attack_iterations: int = 10  # updates of the attack copy per epoch
    render_iterations: int = 25  # poison-render batches per epoch
    epsilon: float = 32.0  # 8-bit pixel units
    use_constraint: int = 0
    constraint_angles: tuple = ()
    rays_per_batch: Optional[int] = None  # poison-render batch; None covers every pixel once per epoch
    seed: int = 0
    attack_learning_rate: Optional[float] = None  # None shares the victim's (decayed) rate
    carry_attack_optimizer: bool = False  # keep the attack copy's Adam moments across epochs

    def __post_init__(self):
        object.__setattr__(self, "constraint_angles", tuple(float(a) for a in self.constraint_angles))
        for name in ("total_iterations", "epoch_iterations", "attack_iterations", "render_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.epoch_iterations == 0 or self.total_iterations % self.epoch_iterations:
            raise ConfigError(f"epoch_iterations ({self.epoch_iterations}) must divide "
                              f"total_iterations ({self.total_iterations})")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.use_constraint not in (0, 1):
            raise ConfigError(f"use_constraint must be 0 or 1, got {self.use_constraint}")
        if self.use_constraint and not self.constraint_angles:
            raise ConfigError("use_constraint=1 requires at least one constraint angle")
        if self.rays_per_batch is not None and self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be positive")

    @property
    def epochs(self) -> int:
        return self.total_iterations // self.epoch_iterations

    @property
    def total_attack_iterations(self) -> int:
        return self.epochs * self.attack_iterations

    def as_dict(self) -> dict:
        d = asdict(self)
        d["constraint_angles"] = list(self.constraint_angles)
        return d

    def schedule_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class IllusoryTarget:
    backdoor_view_index: int
    image: np.ndarray  # (H, W, 3) in [0, 1]


@dataclass
class PoisonState:
    clean: np.ndarray  # (V, H, W, 3) float64
    poisoned: np.ndarray
    epoch: int = 0

    @classmethod
    def from_clean(cls, images: np.ndarray) -> "PoisonState":
        clean = np.asarray(images, dtype=np.float64)
        return cls(clean, clean.copy())

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.poisoned - self.clean))) if self.clean.size else 0.0


def clip_poison(state: PoisonState, epsilon: float) -> PoisonState:
    """Project the poisoned images into the L-inf ball of radius epsilon/255 and into [0, 1]."""
    e = epsilon / 255.0
    p = np.minimum(np.maximum(state.poisoned, state.clean - e), state.clean + e)
    return PoisonState(state.clean, np.clip(p, 0.0, 1.0), state.epoch)


def check_clip(state: PoisonState, epsilon: float, tol: float = 1e-9) -> float:
    dev = state.max_deviation()
    if dev > epsilon / 255.0 + tol:
        raise IPANeRFError(f"poison exceeds budget: max deviation {dev * 255:.6f} > epsilon {epsilon}")
    return dev


def quantize_poison(state: PoisonState, epsilon: float) -> np.ndarray:
    """8-bit poisoned images that still respect the budget around the clean images."""
    q = float_to_u8(state.poisoned).astype(np.int64)
    lo = np.ceil(state.clean * 255.0 - epsilon - 1e-9)
    hi = np.floor(state.clean * 255.0 + epsilon + 1e-9)
    q = np.clip(q, np.maximum(lo, 0), np.minimum(hi, 255)).astype(np.uint8)
    dev = np.max(np.abs(q / 255.0 - state.clean)) if q.size else 0.0
    if dev > epsilon / 255.0 + 1e-9:
        raise IPANeRFError(f"quantized poison exceeds budget ({dev * 255:.6f} > {epsilon})")
    return q


# --- attack context -------------------------------------------------------------

@dataclass
class AttackContext:
    """Precomputed ray pools shared by the stages of one attack run."""

    dataset: ViewDataset
    target: IllusoryTarget
    schedule: AttackSchedule
    train_config: TrainConfig
    train_pool: RayPool  # all training views, colours unused
    victim_pool: RayPool  # training views except the backdoor view, poisoned colours
    backdoor_pool: RayPool  # backdoor view, illusory colours
    constraint_pool: Optional[RayPool]  # constraint views, approximate ground truth
    victim_mask: np.ndarray  # train-view mask excluding the backdoor view

    @classmethod
    def build(cls, dataset: ViewDataset, target: IllusoryTarget, schedule: AttackSchedule,
              train_config: TrainConfig, constraints: Optional[ConstraintViewSet] = None, device="cpu"):
        train = dataset.split("train")
        bd = target.backdoor_view_index
        if not 0 <= bd < len(train):
            raise ConfigError(f"backdoor view index {bd} out of range for {len(train)} training views")
        if target.image.shape != train[0].image.shape:
            raise ConfigError(f"target image shape {target.image.shape} != dataset image shape {train[0].image.shape}")
        if schedule.use_constraint and (constraints is None or not constraints.has_images):
            raise ConfigError("angle constraint enabled but no constraint views with ground truth were given")
        intr, near, far = dataset.intrinsics, dataset.near, dataset.far
        images = dataset.images("train")
        poses = [v.pose for v in train]
        mask = np.ones(len(train), dtype=bool)
        mask[bd] = False
        victim_ids = [k for k in range(len(train)) if k != bd]
        pools = dict(
            train_pool=RayPool(poses, images, intr, near, far, device=device, view_ids=list(range(len(train)))),
            victim_pool=RayPool([poses[k] for k in victim_ids], images[mask], intr, near, far, device=device,
                                view_ids=victim_ids),
            backdoor_pool=RayPool([poses[bd]], target.image[None], intr, near, far, device=device, view_ids=[bd]),
            constraint_pool=None,
        )
        if schedule.use_constraint:
            pools["constraint_pool"] = RayPool([v.pose for v in constraints.views],
                                               np.stack([v.image for v in constraints.views]),
                                               intr, near, far, device=device)
        return cls(dataset, target, schedule, train_config, victim_mask=mask, **pools)


def attack_inner_step(model_copy: RadianceField, optimizer, ctx: AttackContext, generator: torch.Generator,
                      learning_rate: float, iteration: int = 0) -> float:
    """One update of the attack copy toward the illusory view (plus the neighbour term when enabled)."""
    cfg = ctx.train_config
    if ctx.schedule.use_constraint:
        if ctx.constraint_pool is None or len(ctx.constraint_pool) == 0:
            raise ConfigError("angle constraint enabled with an empty constraint set")
        n_bd = cfg.batch_rays // 2
        _, s1, c1 = ctx.backdoor_pool.draw(n_bd, cfg.n_samples, generator)
        _, s2, c2 = ctx.constraint_pool.draw(cfg.batch_rays - n_bd, cfg.n_samples, generator)
        samples = type(s1)(torch.cat([s1.t, s2.t]), torch.cat([s1.deltas, s2.deltas]),
                           torch.cat([s1.points, s2.points]), torch.cat([s1.dirs, s2.dirs]))
        truth = torch.cat([c1, c2])
    else:
        _, samples, truth = ctx.backdoor_pool.draw(cfg.batch_rays, cfg.n_samples, generator)
    return train_step(model_copy, samples, truth, optimizer, learning_rate, iteration,
                      error_cls=AttackDivergenceError)


def render_poison(model_copy: RadianceField, state: PoisonState, ctx: AttackContext,
                  generator: torch.Generator) -> PoisonState:
    """K batches of training pixels, drawn without replacement, re-rendered by the attack copy."""
    k_iters = ctx.schedule.render_iterations
    if k_iters == 0:
        return state
    pool = ctx.train_pool
    total = len(pool)
    batch = ctx.schedule.rays_per_batch or math.ceil(total / k_iters)
    order = torch.randperm(total, generator=generator)
    flat = state.poisoned.reshape(-1, 3).copy()
    cfg = ctx.train_config
    with torch.no_grad():
        for k in range(k_iters):
            idx = order[k * batch:(k + 1) * batch]
            if idx.numel() == 0:
                break
            for s in range(0, idx.numel(), cfg.chunk):
                sub = idx[s:s + cfg.chunk].to(pool.origins.device)
                samples = sample_stratified(pool.origins[sub], pool.dirs[sub], pool.near, pool.far,
                                            cfg.n_samples, dtype=pool.origins.dtype)
                color = render_rays(model_copy, samples).color.clamp(0.0, 1.0)
                flat[sub.cpu().numpy()] = color.cpu().numpy()
    return PoisonState(state.clean, flat.reshape(state.poisoned.shape), state.epoch)


def victim_train_epoch(victim: TrainState, ctx: AttackContext, iterations: Optional[int] = None) -> List[float]:
    """Ordinary training steps on the poisoned views; the backdoor view is not in the pool."""
    n = ctx.schedule.epoch_iterations if iterations is None else iterations
    return [victim.step(ctx.victim_pool) for _ in range(n)]


# --- full loop ---------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    inner_loss: float
    victim_loss: float
    backdoor_psnr: float
    train_psnr: float
    constraint_start: Optional[float] = None
    constraint_end: Optional[float] = None
    max_deviation: float = 0.0
    copy_distance: float = 0.0


TRACE_COLUMNS = ("epoch", "inner_loss", "victim_loss", "backdoor_psnr", "train_psnr",
                 "constraint_start", "constraint_end")


def trace_to_csv(trace: Sequence[EpochRecord]) -> str:
    def fmt(v):
        if v is None:
            return ""
        return str(v) if isinstance(v, int) else f"{v:.6f}"

    lines = [",".join(TRACE_COLUMNS)]
    for r in trace:
        lines.append(",".join(fmt(getattr(r, c)) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"


@dataclass
class AttackResult:
    victim: TrainState
    attack_copy: RadianceField
    poison: PoisonState
    trace: List[EpochRecord]
    constraints: Optional[ConstraintViewSet]
    victim_updates: int = 0
    inner_updates: int = 0


def build_constraints(dataset: ViewDataset, target: IllusoryTarget, angles, clean_model=None,
                      n_samples: int = 64, chunk: int = 8192) -> ConstraintViewSet:
    pose = dataset.split("train")[target.backdoor_view_index].pose
    views = neighbor_viewpoints(pose_to_spherical(pose), angles)
    if clean_model is None:
        return views
    return approximate_ground_truth(clean_model, views, dataset.intrinsics, n_samples, dataset.near,
                                    dataset.far, chunk)


def _constraint_term(model, ctx: AttackContext, probe) -> Optional[float]:
    if probe is None:
        return None
    samples, truth = probe
    with torch.no_grad():
        return float(rgb_loss(render_rays(model, samples).color, truth))


def run_ipa(dataset: ViewDataset, target: IllusoryTarget, schedule: AttackSchedule, train_config: TrainConfig,
            arch: Architecture, encoding: EncodingConfig, clean_model: Optional[RadianceField] = None,
            constraints: Optional[ConstraintViewSet] = None, device="cpu",
            on_epoch: Optional[Callable[[EpochRecord, PoisonState], None]] = None) -> AttackResult:
    """Run the whole poisoning loop; deterministic for a given ``schedule.seed``."""
    if schedule.use_constraint and constraints is None:
        if clean_model is None:
            raise ConfigError("angle constraint enabled but neither constraint views nor a clean model were given")
        constraints = build_constraints(dataset, target, schedule.constraint_angles, clean_model,
                                        train_config.n_samples, train_config.chunk)
    ctx = AttackContext.build(dataset, target, schedule, train_config, constraints, device)
    victim = TrainState.create(arch, encoding, train_config, schedule.seed, device=device)
    inner_gen = torch.Generator().manual_seed(schedule.seed + 1)
    render_gen = torch.Generator().manual_seed(schedule.seed + 2)
    state = PoisonState.from_clean(dataset.images("train"))
    bd_pose = dataset.split("train")[target.backdoor_view_index].pose
    probe = None
    if schedule.use_constraint:
        pool = ctx.constraint_pool
        idx = torch.randperm(len(pool), generator=torch.Generator().manual_seed(schedule.seed + 3))
        idx = idx[:min(len(pool), 4 * train_config.batch_rays)]
        probe = (sample_stratified(pool.origins[idx], pool.dirs[idx], pool.near, pool.far, train_config.n_samples,
                                   dtype=pool.origins.dtype), pool.colors[idx])

    trace: List[EpochRecord] = []
    attack_copy = victim.model
    inner_updates = 0
    victim_updates = 0
    carried = None
    for epoch in range(schedule.epochs):
        stage = "attack"
        try:
            attack_copy = copy_model(victim.model)
            copy_distance = float(torch.linalg.vector_norm(flat_parameters(attack_copy) - flat_parameters(victim.model)))
            optimizer = make_optimizer(attack_copy, train_config.learning_rate)
            if schedule.carry_attack_optimizer and carried is not None:
                for p_new, st in zip(attack_copy.parameters(), carried):
                    optimizer.state[p_new] = {k: v.clone() for k, v in st.items()}
            lr = schedule.attack_learning_rate or train_config.lr_at(victim.iteration)
            c_start = _constraint_term(attack_copy, ctx, probe)
            inner = []
            for j in range(schedule.attack_iterations):
                inner.append(attack_inner_step(attack_copy, optimizer, ctx, inner_gen, lr, inner_updates))
                inner_updates += 1
            c_end = _constraint_term(attack_copy, ctx, probe)
            carried = [optimizer.state[p] for p in attack_copy.parameters()]

            stage = "render"
            state = render_poison(attack_copy, state, ctx, render_gen)
            stage = "clip"
            state = clip_poison(state, schedule.epsilon)
            state.epoch = epoch + 1
            dev = check_clip(state, schedule.epsilon)
            ctx.victim_pool.set_colors(state.poisoned[ctx.victim_mask])

            stage = "victim"
            losses = victim_train_epoch(victim, ctx)
            victim_updates += len(losses)

            stage = "evaluate"
            img = render_view(victim.model, bd_pose, dataset.intrinsics, train_config.chunk, train_config.n_samples,
                              dataset.near, dataset.far)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            record = EpochRecord(
                epoch=epoch + 1,
                inner_loss=float(np.mean(inner)) if inner else float("nan"),
                victim_loss=mean_loss,
                backdoor_psnr=psnr(img, target.image),
                train_psnr=-10.0 * math.log10(mean_loss / 3.0) if losses and mean_loss > 0 else float("nan"),
                constraint_start=c_start,
                constraint_end=c_end,
                max_deviation=dev,
                copy_distance=copy_distance,
            )
        except IPANeRFError as e:
            raise StageError(epoch + 1, stage, e) from e
        trace.append(record)
        log.info("epoch %d/%d: inner %.5f victim %.5f backdoor PSNR %.2f", record.epoch, schedule.epochs,
                 record.inner_loss, record.victim_loss, record.backdoor_psnr)
        if on_epoch is not None:
            on_epoch(record, state)

    if schedule.use_constraint and trace:
        held = sum(1 for r in trace if r.constraint_end <= r.constraint_start)
        if held < 0.8 * len(trace):
            log.warning("constraint term increased during %d of %d epochs", len(trace) - held, len(trace))
    return AttackResult(victim, attack_copy, state, trace, constraints, victim_updates, inner_updates)


def export_poison(state: PoisonState, dataset: ViewDataset, directory, schedule: AttackSchedule) -> np.ndarray:
    """Write the 8-bit poisoned training views plus a manifest; returns the quantized stack."""
    directory = Path(directory)
    q = quantize_poison(state, schedule.epsilon)
    names = []
    for k, img in enumerate(q):
        name = f"r_{k}.png"
        write_png(directory / name, img)
        names.append(name)
    manifest = {
        "epsilon": schedule.epsilon,
        "epoch": state.epoch,
        "schedule_hash": schedule.schedule_hash(),
        "schedule": schedule.as_dict(),
        "views": [{"file": n, "source": v.name} for n, v in zip(names, dataset.split("train"))],
        "max_deviation_8bit": int(np.max(np.abs(q.astype(np.int64) - np.rint(state.clean * 255.0)))) if q.size else 0,
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2))
    return q
