"""Checkpoint container.

A checkpoint is a zip archive of ``.npy`` members with fixed timestamps, so the
same training run always produces the same bytes:

    header.npy           "IPANERF-CKPT-1"
    meta.npy             JSON: architecture, encoding, train config, iteration, seed, dtype
    parameters.npy       flat float64 parameter vector (model.parameters() order)
    adam_exp_avg.npy     flat float64 first moments (empty if no optimizer step yet)
    adam_exp_avg_sq.npy  flat float64 second moments
    adam_step.npy        float64 step count per parameter tensor
    generator.npy        uint8 state of the batch-sampling generator
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DatasetFormatError
from .nerf_core import (Architecture, EncodingConfig, RadianceField, TrainConfig, TrainState, flat_parameters,
                        make_optimizer)

HEADER = "IPANERF-CKPT-1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(DatasetFormatError):
    pass


def _member(zf: zipfile.ZipFile, name: str, array: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asanyarray(array), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, buf.getvalue())


def _flatten_optimizer(model: nn.Module, optimizer: torch.optim.Optimizer):
    params = list(model.parameters())
    avg, avg_sq, steps = [], [], []
    for p in params:
        st = optimizer.state.get(p, {})
        if "exp_avg" not in st:
            return np.zeros(0), np.zeros(0), np.zeros(0)
        avg.append(st["exp_avg"].detach().reshape(-1).double().cpu())
        avg_sq.append(st["exp_avg_sq"].detach().reshape(-1).double().cpu())
        steps.append(float(st["step"]))
    return torch.cat(avg).numpy(), torch.cat(avg_sq).numpy(), np.asarray(steps)


def save_checkpoint(path, state: TrainState) -> Path:
    """Write ``state`` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = state.model
    meta = {
        "architecture": asdict(model.arch),
        "encoding": asdict(model.encoding),
        "train_config": asdict(state.config),
        "iteration": state.iteration,
        "seed": state.seed,
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    avg, avg_sq, steps = _flatten_optimizer(model, state.optimizer)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _member(zf, "header", np.array(HEADER))
        _member(zf, "meta", np.array(json.dumps(meta, sort_keys=True)))
        _member(zf, "parameters", flat_parameters(model).double().cpu().numpy())
        _member(zf, "adam_exp_avg", avg)
        _member(zf, "adam_exp_avg_sq", avg_sq)
        _member(zf, "adam_step", steps)
        _member(zf, "generator", state.generator.get_state().numpy())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, device="cpu") -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing file: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            arrays = {n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                      for n in zf.namelist()}
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if str(arrays.get("header")) != HEADER:
        raise CheckpointError(f"{path}: bad header {arrays.get('header')!r}")
    meta = json.loads(str(arrays["meta"]))
    arch = Architecture(**meta["architecture"])
    encoding = EncodingConfig(**meta["encoding"])
    config = TrainConfig(**meta["train_config"])
    dtype = getattr(torch, meta["dtype"])
    model = RadianceField(arch, encoding).to(device=device, dtype=dtype)
    params = torch.as_tensor(arrays["parameters"], dtype=dtype, device=device)
    if params.numel() != flat_parameters(model).numel():
        raise CheckpointError(f"{path}: parameter count mismatch")
    nn.utils.vector_to_parameters(params, model.parameters())
    optimizer = make_optimizer(model, config.learning_rate)
    avg, avg_sq, steps = arrays["adam_exp_avg"], arrays["adam_exp_avg_sq"], arrays["adam_step"]
    if avg.size:
        offset = 0
        for p, step in zip(model.parameters(), steps):
            n = p.numel()
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.as_tensor(avg[offset:offset + n], dtype=dtype, device=device).view_as(p).clone(),
                "exp_avg_sq": torch.as_tensor(avg_sq[offset:offset + n], dtype=dtype, device=device).view_as(p).clone(),
            }
            offset += n
    generator = torch.Generator()
    generator.set_state(torch.as_tensor(arrays["generator"], dtype=torch.uint8))
    return TrainState(model, optimizer, config, int(meta["seed"]), int(meta["iteration"]), generator)
