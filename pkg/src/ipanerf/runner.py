"""Experiment commands behind the CLI: clean training, attack, evaluation, rendering, ablation."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .attack import TRACE_COLUMNS, AttackResult, build_constraints, export_poison, run_ipa, trace_to_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Experiment, apply_overrides, experiment_from_dict, load_config, validate
from .errors import ConfigError, IncompleteRunError, IPANeRFError
from .metrics import PARTITIONS, evaluate_partitions, measure, psnr
from .nerf_core import RayPool, TrainState, make_optimizer, render_view, train
from .scene_data import atomic_write_text, read_image, write_png
from .view_geometry import SphericalPose, load_constraints, save_constraints, spherical_to_pose

log = logging.getLogger(__name__)

CLEAN_CKPT = Path("clean") / "model.ckpt"
VICTIM_CKPT = Path("checkpoints") / "victim.ckpt"
COPY_CKPT = Path("checkpoints") / "attack_copy.ckpt"


def device_from_env() -> str:
    """IPANERF_DEVICE: ``cpu`` (default) or an accelerator index."""
    value = os.environ.get("IPANERF_DEVICE", "cpu").strip()
    if value in ("", "cpu"):
        return "cpu"
    if value.isdigit():
        if not torch.cuda.is_available():
            raise ConfigError(f"IPANERF_DEVICE={value} but no accelerator is available")
        return f"cuda:{value}"
    raise ConfigError(f"IPANERF_DEVICE must be 'cpu' or an integer index, got {value!r}")


# --- run manifest -------------------------------------------------------------------

def _platform_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


def _manifest_path(run_dir: Path) -> Path:
    return run_dir / "manifest.json"


def _read_manifest(run_dir: Path) -> dict:
    p = _manifest_path(run_dir)
    return json.loads(p.read_text()) if p.is_file() else {}


def open_run(exp: Experiment) -> Path:
    """Create the run directory and write the config snapshot and manifest before any stage runs."""
    run_dir = exp.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / "config.json", json.dumps(exp.doc, indent=2, sort_keys=True) + "\n")
    manifest = _read_manifest(run_dir)
    if not manifest:
        manifest = {
            "config": exp.doc,
            "software_version": __version__,
            "platform": _platform_fingerprint(),
            "schedule_hash": exp.schedule.schedule_hash(),
            "stages": [],
        }
    elif manifest.get("schedule_hash") != exp.schedule.schedule_hash():
        manifest.setdefault("schedule_history", []).append(manifest.get("schedule_hash"))
        manifest["schedule_hash"] = exp.schedule.schedule_hash()
        manifest["config"] = exp.doc
    atomic_write_text(_manifest_path(run_dir), json.dumps(manifest, indent=2))
    return run_dir


@contextmanager
def stage(run_dir: Path, name: str):
    start = time.time()
    status = "ok"
    try:
        yield
    except BaseException as e:
        status = f"error: {type(e).__name__}: {e}"
        raise
    finally:
        manifest = _read_manifest(run_dir)
        manifest.setdefault("stages", []).append(
            {"stage": name, "started": start, "seconds": round(time.time() - start, 3), "status": status})
        atomic_write_text(_manifest_path(run_dir), json.dumps(manifest, indent=2))


def load_run_experiment(run_dir) -> Experiment:
    run_dir = Path(run_dir)
    cfg = run_dir / "config.json"
    if not cfg.is_file():
        raise IncompleteRunError([str(cfg)])
    doc = json.loads(cfg.read_text())
    doc["run_dir"] = str(run_dir)
    return experiment_from_dict(validate(doc, check_paths=False))


# --- commands -----------------------------------------------------------------------

def _summary(model, views, exp: Experiment, intr, near, far) -> dict:
    if not views:
        return {"psnr": None, "ssim": None, "views": 0}
    ms = [measure(render_view(model, v.pose, intr, exp.train.chunk, exp.train.n_samples, near, far), v.image)
          for v in views]
    return {"psnr": float(np.mean([m.psnr for m in ms])), "ssim": float(np.mean([m.ssim for m in ms])),
            "views": len(ms)}


def cmd_train_clean(doc: dict) -> Path:
    """Train the unpoisoned baseline; writes clean/model.ckpt and clean/baseline.json."""
    exp = experiment_from_dict(doc)
    run_dir = open_run(exp)
    device = device_from_env()
    with stage(run_dir, "train-clean"):
        ds = exp.dataset()
        train_views = ds.split("train")
        pool = RayPool([v.pose for v in train_views], ds.images("train"), ds.intrinsics, ds.near, ds.far,
                       device=device)
        state = TrainState.create(exp.arch, exp.encoding, exp.train, exp.seed, device=device)
        train(state, pool, doc["clean_iterations"], log_every=500, log=log.info)
        path = save_checkpoint(run_dir / CLEAN_CKPT, state)
        baseline = {
            "iterations": state.iteration,
            "train": _summary(state.model, train_views, exp, ds.intrinsics, ds.near, ds.far),
            "test": _summary(state.model, ds.split("test"), exp, ds.intrinsics, ds.near, ds.far),
        }
        atomic_write_text(run_dir / "clean" / "baseline.json", json.dumps(baseline, indent=2) + "\n")
    return path


def cmd_attack(doc: dict, clean_checkpoint=None) -> Path:
    """Run the poisoning loop and persist poisoned views, checkpoints and the per-epoch trace."""
    exp = experiment_from_dict(doc)
    run_dir = open_run(exp)
    device = device_from_env()
    if clean_checkpoint is None and (run_dir / CLEAN_CKPT).is_file():
        clean_checkpoint = run_dir / CLEAN_CKPT
    if exp.schedule.use_constraint and (clean_checkpoint is None or not Path(clean_checkpoint).is_file()):
        raise IncompleteRunError([f"clean checkpoint (required by the angle constraint): "
                                  f"{clean_checkpoint or run_dir / CLEAN_CKPT}"])
    with stage(run_dir, "attack"):
        ds = exp.dataset()
        target = exp.target(ds)
        write_png(run_dir / "target.png", target.image)
        constraints = None
        if exp.schedule.use_constraint:
            clean = load_checkpoint(clean_checkpoint, device).model
            constraints = build_constraints(ds, target, exp.schedule.constraint_angles, clean,
                                            exp.train.n_samples, exp.train.chunk)
            save_constraints(constraints, run_dir / "constraints")
            # evaluation reads the 8-bit images back, so the attack uses the same quantized values
            constraints = load_constraints(run_dir / "constraints")
        result = run_ipa(ds, target, exp.schedule, exp.train, exp.arch, exp.encoding,
                         constraints=constraints, device=device)
        export_poison(result.poison, ds, run_dir / "poisoned", exp.schedule)
        save_checkpoint(run_dir / VICTIM_CKPT, result.victim)
        copy_state = TrainState(result.attack_copy, make_optimizer(result.attack_copy, exp.train.learning_rate),
                                exp.train, exp.seed, result.inner_updates)
        save_checkpoint(run_dir / COPY_CKPT, copy_state)
        atomic_write_text(run_dir / "trace.csv", trace_to_csv(result.trace))
    return run_dir


def required_artifacts(run_dir: Path, exp: Experiment) -> List[Path]:
    needed = [run_dir / "config.json", run_dir / VICTIM_CKPT, run_dir / "target.png"]
    if exp.schedule.use_constraint:
        needed.append(run_dir / "constraints" / "constraints.json")
    return needed


def cmd_evaluate(run_dir, lpips_backend=None):
    """Score the victim over the four partitions; writes report.csv and report.txt."""
    run_dir = Path(run_dir)
    exp = load_run_experiment(run_dir)
    missing = [str(p) for p in required_artifacts(run_dir, exp) if not p.is_file()]
    constraints = None
    if exp.schedule.use_constraint and not missing:
        constraints = load_constraints(run_dir / "constraints")
        if not constraints.has_images:
            missing.append(str(run_dir / "constraints" / "view_*.png"))
    if missing:
        raise IncompleteRunError(missing)
    device = device_from_env()
    with stage(run_dir, "evaluate"):
        ds = exp.dataset()
        target = exp.target(ds)
        target.image = read_image(run_dir / "target.png")
        victim = load_checkpoint(run_dir / VICTIM_CKPT, device).model
        report = evaluate_partitions(victim, ds, target, constraints, n_samples=exp.train.n_samples,
                                     chunk=exp.train.chunk, schedule_id=exp.schedule.schedule_hash(),
                                     lpips_backend=lpips_backend)
        atomic_write_text(run_dir / "report.csv", report.to_csv())
        atomic_write_text(run_dir / "report.txt", report.to_table())
    return report


def parse_pose_spec(spec: str, dataset):
    """``train:3`` / ``test:0`` / ``val:1`` by dataset index, or ``sph:RADIUS,THETA_DEG,PHI_DEG``."""
    kind, _, rest = spec.partition(":")
    if kind in ("train", "test", "val"):
        try:
            index = int(rest)
        except ValueError:
            raise ConfigError(f"pose spec {spec!r}: index must be an integer") from None
        views = dataset.split(kind)
        if not 0 <= index < len(views):
            raise ConfigError(f"pose spec {spec!r}: index out of range for {len(views)} {kind} views")
        return views[index].pose
    if kind == "sph":
        try:
            r, th, ph = (float(x) for x in rest.split(","))
            return spherical_to_pose(SphericalPose.from_degrees(r, th, ph))
        except ValueError as e:
            raise ConfigError(f"pose spec {spec!r}: {e}") from None
    raise ConfigError(f"pose spec {spec!r}: expected train:I, test:I, val:I or sph:R,THETA,PHI")


def cmd_render(checkpoint, pose_spec: str, output, doc: dict) -> Path:
    """Render an 8-bit PNG from ``checkpoint`` at a dataset or spherical pose."""
    exp = experiment_from_dict(doc)
    ds = exp.dataset()
    pose = parse_pose_spec(pose_spec, ds)
    model = load_checkpoint(checkpoint, device_from_env()).model
    img = render_view(model, pose, ds.intrinsics, exp.train.chunk, exp.train.n_samples, ds.near, ds.far)
    output = Path(output)
    write_png(output, img)
    return output


SWEEP_AXES = ("schedule.epsilon", "schedule.constraint_angles")


def load_sweep(spec) -> dict:
    if isinstance(spec, (str, Path)):
        name = str(spec)
        p = Path(name)
        if not p.is_file():
            from importlib import resources
            res = resources.files("ipanerf").joinpath("configs", "sweeps", f"{name}.json")
            if not res.is_file():
                raise ConfigError(f"sweep spec not found: {name}")
            spec = json.loads(res.read_text())
        else:
            spec = json.loads(p.read_text())
    if not isinstance(spec, dict) or spec.get("axis") not in SWEEP_AXES:
        raise ConfigError(f"sweep spec needs 'axis' in {SWEEP_AXES}")
    if not spec.get("values"):
        raise ConfigError("sweep spec has no values")
    return spec


def _label(value) -> str:
    if isinstance(value, list):
        return "+".join(f"{v:g}" for v in value)
    return f"{value:g}" if isinstance(value, (int, float)) else str(value)


def cmd_ablate(doc: dict, sweep) -> str:
    """Run one attack + evaluation per sweep value (sharing one clean baseline) and tabulate the means."""
    sweep = load_sweep(sweep)
    exp = experiment_from_dict(doc)
    run_dir = open_run(exp)
    clean = run_dir / CLEAN_CKPT
    needs_clean = doc["schedule"]["use_constraint"] or any(
        o.startswith("schedule.use_constraint=1") for o in sweep.get("set", []))
    if needs_clean and not clean.is_file():
        cmd_train_clean(doc)
    rows = []
    for value in sweep["values"]:
        label = _label(value)
        sub = run_dir / "sweep" / f"{sweep['axis'].split('.')[-1]}={label}"
        overrides = list(sweep.get("set", [])) + [f"{sweep['axis']}={json.dumps(value)}", f"run_dir={json.dumps(str(sub))}"]
        try:
            sub_doc = validate(apply_overrides(doc, overrides), check_paths=False)
            cmd_attack(sub_doc, clean if clean.is_file() else None)
            report = cmd_evaluate(sub)
            rows.append((label, report.means, None))
        except IPANeRFError as e:
            log.error("sweep point %s failed: %s", label, e)
            rows.append((label, None, str(e)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([sweep["axis"]] + [f"{p}:{m}" for p in PARTITIONS for m in ("psnr", "ssim", "lpips")] + ["error"])
    lines = [f"{sweep['axis']:<20}" + "".join(f"| {p:^26}" for p in PARTITIONS)]
    for label, means, err in rows:
        cells, text = [], f"{label:<20}"
        for p in PARTITIONS:
            m = means.get(p) if means else None
            if m is None:
                cells += ["", "", ""]
                text += "| {:>8} {:>8} {:>8}".format("-", "-", "-")
            else:
                lp = "" if m.lpips is None else f"{m.lpips:.6f}"
                cells += [f"{m.psnr:.6f}", f"{m.ssim:.6f}", lp]
                text += f"| {m.psnr:>8.2f} {m.ssim:>8.4f} {lp[:8] or 'n/a':>8}"
        w.writerow([label] + cells + [err or ""])
        lines.append(text + (f"  [failed: {err}]" if err else ""))
    table = "\n".join(lines) + "\n"
    atomic_write_text(run_dir / "ablation.csv", buf.getvalue())
    atomic_write_text(run_dir / "ablation.txt", table)
    return table
