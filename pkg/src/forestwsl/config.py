"""Flat key=value experiment configuration with named profiles."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import seeding
from .metrics_eval import config_hash
from .self_training import RefineConfig
from .synth_scene import NoiseSpec, SceneSpec
from .training import TrainConfig
from .unet_model import NAMED_CONFIGS, UnetConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    profile: str = "tiny"
    # scene synthesis
    size: int = 192
    test_size: int = 128
    forest_fraction: float = 0.5
    blob_scale: int = 8
    looks: int = 10
    coarse_factor: int = 8
    flip_rate: float = 0.08
    jitter_radius: int = 2
    # sampling
    patch: int = 32
    train_patches: int = 500
    val_patches: int = 100
    split_fraction: float = 0.8
    keep_fraction: float = 0.02
    # network
    unet: str = "tiny"
    dropout_rate: float = 0.5
    skip_mode: str = "concat"
    init_mode: str = "he"
    # optimisation
    learning_rate: float = 0.001
    batch_size: int = 16
    weight_decay: float = 0.0005
    max_epochs: int = 12
    patience: int = 5
    augment: bool = True
    # refinement and tiled prediction
    stop_threshold: float = 0.10
    max_rounds: int = 8
    fine_tune: bool = False
    tile: int = 64
    overlap: int = 32

    def scene_spec(self, which: str = "train") -> SceneSpec:
        side = self.size if which == "train" else self.test_size
        return SceneSpec(
            seed=seeding.derive_seed(self.seed, "scene", which),
            height=side,
            width=side,
            forest_fraction=self.forest_fraction,
            blob_scale=self.blob_scale,
            looks=self.looks,
        )

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(
            seed=seeding.derive_seed(self.seed, "noise"),
            coarse_factor=self.coarse_factor,
            flip_rate=self.flip_rate,
            jitter_radius=self.jitter_radius,
        )

    def unet_config(self) -> UnetConfig:
        if self.unet not in NAMED_CONFIGS:
            raise ConfigError(f"unknown unet {self.unet!r}; choose from {sorted(NAMED_CONFIGS)}")
        return dataclasses.replace(
            NAMED_CONFIGS[self.unet], dropout_rate=self.dropout_rate, skip_mode=self.skip_mode, init_mode=self.init_mode
        )

    def train_config(self, stream: str) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seeding.derive_seed(self.seed, "train", stream),
            augment=self.augment,
        )

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            stop_threshold=self.stop_threshold,
            max_rounds=self.max_rounds,
            train=self.train_config("refine"),
            unet=self.unet_config(),
            patch=self.patch,
            train_patches=self.train_patches,
            val_patches=self.val_patches,
            split_fraction=self.split_fraction,
            tile=self.tile,
            overlap=self.overlap,
            seed=seeding.derive_seed(self.seed, "refine"),
            fine_tune=self.fine_tune,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return config_hash(self.to_text())


PROFILES: dict[str, dict[str, object]] = {
    "tiny": {},
    "full": {
        "size": 1536,
        "test_size": 512,
        "patch": 64,
        "train_patches": 11995,
        "val_patches": 1990,
        "unet": "full",
        "max_epochs": 50,
        "patience": 10,
        "tile": 256,
        "overlap": 64,
    },
}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


def parse_pairs(text: str, source: str = "config") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(file_values: dict[str, str] | None = None, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    """Profile defaults, then the config file, then flag overrides (flags win)."""
    merged: dict[str, object] = {}
    raw = dict(file_values or {})
    for key in list(raw) + list(overrides or {}):
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    profile = str((overrides or {}).get("profile") or raw.get("profile") or "tiny")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged.update(PROFILES[profile])
    merged["profile"] = profile
    for key, value in raw.items():
        merged[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = _coerce(key, value) if isinstance(value, str) else value
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path: str | Path | None, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    values = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_pairs(p.read_text(encoding="utf-8"), str(p))
    return resolve(values, overrides)
