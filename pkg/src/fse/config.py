"""Run configuration files (YAML).

Every section and key is checked against a fixed schema; unknown keys are
rejected by name so typos such as ``lrr`` fail loudly instead of silently
falling back to a default.

Example::

    seed: 0
    out: runs/desk            # default: $FSE_OUTPUT_ROOT/<config file stem>
    data:
      root: data/train        # required: paired layout shadow/ target/ [mask/]
      manifest: null
    profile: desk             # desk | default
    model:                    # per-stage overrides of the profile
      refine: {num_heads: 2}
    train:
      total_steps: 2000       # required
      batch_size: 4
    augment:
      crop_size: 64
    loss:
      lambda1: 0.2
      lambda2: 0.2
    perceptual_backend: fallback
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .imaging import default_output_root
from .metrics import LossWeights
from .models import FseConfig
from .models.coarse import CoarseNetConfig
from .models.mask import MaskNetConfig
from .models.refine import RefineNetConfig
from .train import TrainConfig

TOP_KEYS = {"seed", "out", "data", "profile", "model", "train", "augment", "loss", "perceptual_backend"}
DATA_KEYS = {"root", "manifest"}
AUGMENT_KEYS = {"crop_size", "enable_hflip", "rotation_choices"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - AUGMENT_KEYS - {"seed", "loss_weights"}
LOSS_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
STAGE_CONFIGS = {"mask": MaskNetConfig, "coarse": CoarseNetConfig, "refine": RefineNetConfig}
PROFILES = {"desk": FseConfig.desk, "default": FseConfig}


@dataclass
class RunConfig:
    fse: FseConfig
    train: TrainConfig
    data_root: Path
    manifest: Optional[Path] = None
    out: Optional[Path] = None
    perceptual_backend: str = "fallback"
    raw: dict = field(default_factory=dict)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)} (allowed: {', '.join(sorted(allowed))})")


def parse_run_config(raw: dict, source: str = "config", out_override=None, seed_override=None) -> RunConfig:
    raw = raw or {}
    _check_keys(raw, TOP_KEYS, source)
    for name, allowed in (("data", DATA_KEYS), ("augment", AUGMENT_KEYS), ("loss", LOSS_KEYS), ("train", TRAIN_KEYS)):
        _check_keys(raw.get(name) or {}, allowed, f"{source}:{name}")
    model = raw.get("model") or {}
    _check_keys(model, set(STAGE_CONFIGS), f"{source}:model")

    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = PROFILES[profile]()
    stages = {}
    for name, cls in STAGE_CONFIGS.items():
        overrides = model.get(name) or {}
        _check_keys(overrides, {f.name for f in dataclasses.fields(cls)}, f"{source}:model.{name}")
        current = dataclasses.asdict(getattr(base, name))
        current.update(overrides)
        if "dilation_rates" in current:
            current["dilation_rates"] = tuple(current["dilation_rates"])
        stages[name] = cls(**current)
    fse = FseConfig(**stages)

    train_kw = dict(raw.get("train") or {})
    if "total_steps" not in train_kw:
        raise ConfigError(f"{source}:train.total_steps is required")
    train_kw.update(raw.get("augment") or {})
    train_kw["loss_weights"] = LossWeights(**(raw.get("loss") or {}))
    train_kw["seed"] = int(seed_override if seed_override is not None else raw.get("seed", 0))
    try:
        train_cfg = TrainConfig(**train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    data = raw.get("data") or {}
    if "root" not in data:
        raise ConfigError(f"{source}:data.root is required")
    out = out_override or raw.get("out")
    if out is None:
        out = default_output_root() / Path(source).stem
    return RunConfig(
        fse=fse,
        train=train_cfg,
        data_root=Path(data["root"]),
        manifest=Path(data["manifest"]) if data.get("manifest") else None,
        out=Path(out),
        perceptual_backend=str(raw.get("perceptual_backend", "fallback")),
        raw=raw,
    )


def load_run_config(path, out_override=None, seed_override=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_run_config(raw, str(path), out_override, seed_override)
