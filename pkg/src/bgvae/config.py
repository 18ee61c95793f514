"""Dataclass configs for architecture and training, plus YAML loading."""

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from .exceptions import ConfigError

NUM_LATENTS = 9
NUM_STAGES = 4
TOTAL_DOWNSAMPLE = 32  # 4x stem, then three 2x wavelet downs


@dataclass(frozen=True)
class ArchConfig:
    """Shared student/teacher architecture description.

    Per-stage tuples are ordered from the lowest resolution (H/32, where
    decoding starts) to the highest (H/4); the default widths read
    96/144/192/240 when listed from high resolution down.
    """

    stage_widths: tuple[int, ...] = (240, 192, 144, 96)
    latents_per_stage: tuple[int, ...] = (1, 2, 3, 3)
    latent_channels: tuple[int, ...] = (32, 16, 8, 8)
    d_lambda: int = 256
    enc_blocks_per_stage: int = 2
    variant: str = "student"

    def __post_init__(self):
        if len(self.stage_widths) != NUM_STAGES or len(self.latents_per_stage) != NUM_STAGES:
            raise ConfigError(f"exactly {NUM_STAGES} stages are required")
        if len(self.latent_channels) != NUM_STAGES:
            raise ConfigError("latent_channels must be given per stage")
        if sum(self.latents_per_stage) != NUM_LATENTS:
            raise ConfigError(f"latents per stage must sum to {NUM_LATENTS}")
        if any(w % 4 for w in self.stage_widths):
            raise ConfigError("stage widths must be divisible by 4")
        if self.variant not in ("student", "teacher"):
            raise ConfigError(f"unknown variant {self.variant!r}")

    def with_variant(self, variant: str) -> "ArchConfig":
        return ArchConfig(**{**asdict(self), "variant": variant})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def toy_arch(variant: str = "student") -> ArchConfig:
    """Desk-scale preset: small enough for CPU training in tests and demos."""
    return ArchConfig(
        stage_widths=(48, 40, 32, 24),
        latents_per_stage=(1, 2, 3, 3),
        latent_channels=(8, 4, 4, 2),
        d_lambda=64,
        enc_blocks_per_stage=1,
        variant=variant,
    )


ARCH_PRESETS = {"default": ArchConfig, "toy": toy_arch}


@dataclass
class TrainConfig:
    """One training run. Paper-scale values are the defaults; toy runs shrink
    iterations, batch and crop size."""

    dataset: str = ""
    iterations: int = 500_000
    batch_size: int = 32
    crop_size: int = 256
    lr: float = 2e-4
    grad_clip: float = 2.0
    ema_decay: float = 0.9999
    lambda_mode: str = "sampled"  # "sampled" draws log-uniformly per step
    lambda_value: float = 512.0
    guidance: bool = False
    feature_loss: str = "affinity"  # "mse" is the ablation variant
    taps: tuple[str, ...] = ("F1", "F2", "F3", "F4", "F5", "F6", "F7", "F8")
    variant: str = "student"
    arch: str = "toy"
    arch_overrides: dict = field(default_factory=dict)
    cosine_tail: float = 0.0  # fraction of iterations on a cosine decay tail
    seed: int = 0

    def __post_init__(self):
        if self.lambda_mode not in ("fixed", "sampled"):
            raise ConfigError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.feature_loss not in ("affinity", "mse"):
            raise ConfigError(f"unknown feature_loss {self.feature_loss!r}")
        if self.variant not in ("student", "teacher"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.arch not in ARCH_PRESETS:
            raise ConfigError(f"unknown arch preset {self.arch!r}")
        if isinstance(self.taps, list):
            self.taps = tuple(self.taps)
        bad = [t for t in self.taps if t not in {f"F{i}" for i in range(1, 9)}]
        if bad:
            raise ConfigError(f"unknown taps: {bad}")

    def arch_config(self) -> ArchConfig:
        base = ARCH_PRESETS[self.arch]()
        merged = {**base.to_dict(), **self.arch_overrides, "variant": self.variant}
        return ArchConfig.from_dict(merged)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a key/value mapping")
        return cls.from_dict(data)

    def to_yaml(self, path) -> None:
        d = asdict(self)
        d["taps"] = list(self.taps)
        Path(path).write_text(yaml.safe_dump(d, sort_keys=False))
