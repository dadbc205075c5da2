"""JSON experiment configuration: loading, dotted-key overrides, validation, object construction."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import jsonschema

from .assets import BUILTIN_TARGETS, load_target
from .attack import AttackSchedule, IllusoryTarget
from .errors import ConfigError
from .nerf_core import Architecture, EncodingConfig, TrainConfig
from .scene_data import ViewDataset, load_blender_dataset, make_toy_scene

PROFILES = ("desk", "paper")


def _resource(name: str) -> str:
    return resources.files("ipanerf").joinpath("configs", name).read_text()


def schema() -> dict:
    return json.loads(_resource("config.schema.json"))


def profile(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    return json.loads(_resource(f"{name}.json"))


def parse_override(item: str):
    """``a.b.c=VALUE`` -> (["a", "b", "c"], value); VALUE is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
    key, raw = item.split("=", 1)
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        keys, value = parse_override(item)
        node = doc
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"override {item!r}: {k!r} is not a section")
            node = node[k]
        node[keys[-1]] = value
    return doc


def validate(doc: dict, check_paths: bool = True) -> dict:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None
    if check_paths:
        if doc["scene"]["type"] == "blender" and not Path(doc["scene"]["path"]).is_dir():
            raise ConfigError(f"scene path does not exist: {doc['scene']['path']}")
        src = doc["target"]["source"]
        if src not in BUILTIN_TARGETS and not Path(src).is_file():
            raise ConfigError(f"target image does not exist: {src}")
    try:
        experiment_from_dict(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config invalid: {e}") from None
    return doc


def load_config(path=None, overrides: Iterable[str] = (), seed: Optional[int] = None,
                run_dir=None, check_paths: bool = True) -> dict:
    """Config document from ``path`` (default: the desk profile) with CLI-style overrides applied."""
    if path is None:
        doc = profile("desk")
    elif str(path) in PROFILES:
        doc = profile(str(path))
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    if run_dir is not None:
        doc["run_dir"] = str(run_dir)
    return validate(doc, check_paths)


@dataclass
class Experiment:
    doc: dict
    arch: Architecture
    encoding: EncodingConfig
    train: TrainConfig
    schedule: AttackSchedule

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def run_dir(self) -> Path:
        return Path(self.doc["run_dir"])

    def dataset(self) -> ViewDataset:
        s = self.doc["scene"]
        if s["type"] == "toy":
            return make_toy_scene(s.get("seed", 0), s["n_train"], s["n_test"], s["resolution"], s.get("radius", 4.0))
        return load_blender_dataset(s["path"], s.get("downsample", 1), s.get("near", 2.0), s.get("far", 6.0))

    def target(self, dataset: ViewDataset) -> IllusoryTarget:
        t = self.doc["target"]
        n_train = len(dataset.split("train"))
        if not 0 <= t["backdoor_index"] < n_train:
            raise ConfigError(f"backdoor_index {t['backdoor_index']} out of range for {n_train} training views")
        intr = dataset.intrinsics
        if intr.width != intr.height:
            raise ConfigError("builtin targets need square images")
        try:
            image = load_target(t["source"], intr.width)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return IllusoryTarget(t["backdoor_index"], image)


def experiment_from_dict(doc: dict) -> Experiment:
    m = doc["model"]
    arch = Architecture(**{k: m[k] for k in ("depth", "width", "skip", "use_viewdirs") if k in m})
    enc = EncodingConfig(**{k: m[k] for k in ("n_freq_position", "n_freq_direction", "include_input") if k in m})
    train = TrainConfig(**doc["training"])
    sched = dict(doc["schedule"])
    sched["constraint_angles"] = tuple(sched.get("constraint_angles", ()))
    schedule = AttackSchedule(seed=doc["seed"], **sched)
    return Experiment(doc, arch, enc, train, schedule)
