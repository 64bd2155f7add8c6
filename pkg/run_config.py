#!/usr/bin/env python3
"""
Run Configuration
One INI-style file captures a run: [model] [norm] [train] [weights] [eval].
Lists are comma separated, booleans are true/false. Keys left out take the
dataclass defaults; unknown keys are rejected.
"""

import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Mapping

from models import ModelConfig
from normalization import NormConfig
from training import LossWeights, TrainConfig

SECTIONS = ("model", "norm", "train", "weights", "eval")


@dataclass
class EvalConfig:
    n_patches: int = 64
    seed: int = 0
    tiled: bool = False
    workers: int = 4

    def __post_init__(self):
        if self.n_patches < 1:
            raise ValueError(f"n_patches must be >= 1, got {self.n_patches}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    norm: NormConfig = field(default_factory=NormConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)


PRESETS: Dict[str, RunConfig] = {
    # Gradient checks and fast unit tests
    "micro": RunConfig(
        model=ModelConfig(latent_dim=16, hidden_dims=(4, 8), patch_size=8, image_size=16),
        train=TrainConfig(lr=1e-3, batch_images=2, patches_per_image=2, epochs=1),
        eval=EvalConfig(n_patches=4),
    ),
    "desk": RunConfig(
        model=ModelConfig(latent_dim=128, hidden_dims=(32, 64, 128), patch_size=32, image_size=256),
        train=TrainConfig(lr=2e-4, batch_images=8, patches_per_image=16, epochs=30),
        eval=EvalConfig(n_patches=64),
    ),
    # Whole-image model with tracked discriminator statistics
    "desk-full": RunConfig(
        model=ModelConfig(latent_dim=128, hidden_dims=(32, 64, 128, 256), patch_size=64,
                          image_size=64, norm_kind="batch"),
        norm=NormConfig(disc_track_running_stats=True),
        train=TrainConfig(lr=2e-4, batch_images=64, patches_per_image=1, epochs=30, full_image=True),
        eval=EvalConfig(n_patches=1),
    ),
    "paper-patches": RunConfig(
        model=ModelConfig(latent_dim=1024, hidden_dims=(128, 256, 512, 1024), patch_size=64,
                          image_size=256),
        train=TrainConfig(lr=8.5e-5, batch_images=67, patches_per_image=48, epochs=30),
        eval=EvalConfig(n_patches=64),
    ),
    "paper-full": RunConfig(
        model=ModelConfig(latent_dim=1024, hidden_dims=(32, 64, 128, 256, 512, 1024), patch_size=256,
                          image_size=256, norm_kind="batch"),
        norm=NormConfig(disc_track_running_stats=True),
        train=TrainConfig(lr=5e-5, batch_images=660, patches_per_image=1, epochs=70, full_image=True),
        eval=EvalConfig(n_patches=1),
    ),
}

PRESET_ALIASES: Dict[str, str] = {
    "reference-patches": "paper-patches",
    "reference-full": "paper-full",
}


def preset(name: str) -> RunConfig:
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise ValueError(f"Unknown preset '{name}'. Available: {', '.join(PRESETS)}")
    base = PRESETS[name]
    return RunConfig(**{s: replace(getattr(base, s)) for s in SECTIONS})


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"Invalid value for {key}: '{raw}'") from None
    return raw


def _section_values(section) -> Dict[str, object]:
    return {f.name: getattr(section, f.name) for f in fields(section)}


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in _section_values(getattr(cfg, name)).items():
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    """Parse config text on top of `base` (defaults when omitted)."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ValueError(f"Malformed config: {e}") from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ValueError(f"Unknown config sections: {', '.join(unknown)}")

    base = base or RunConfig()
    sections = {}
    for name in SECTIONS:
        current = getattr(base, name)
        values = _section_values(current)
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in values:
                    raise ValueError(f"Unknown key '{key}' in [{name}]")
                values[key] = _convert(raw, values[key], f"{name}.{key}")
        sections[name] = type(current)(**values)
    return RunConfig(**sections)


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, object]) -> RunConfig:
    """Override 'section.key' entries; None values are ignored (flag not given)."""
    updates: Dict[str, Dict[str, object]] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or key not in _section_values(getattr(cfg, section)):
            raise ValueError(f"Unknown config key: {dotted}")
        updates.setdefault(section, {})[key] = value
    return RunConfig(**{s: replace(getattr(cfg, s), **updates.get(s, {})) for s in SECTIONS})


def load_config_file(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
