"""Run configuration: nested sections, strict schema, canonical hash.

Every artifact records the hash of the config that produced it; artifacts
with mismatched hashes refuse to compose. The hash is over the canonical
JSON serialization (sorted keys), so key order in a config file is
irrelevant.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 32
    image_format: str = "png"
    identities_train: int = 24
    identities_test: int = 20
    sequences_train: int = 2
    frames_train: int = 6
    sequences_test: int = 3
    frames_test: int = 10
    train_styles: tuple = (0,)            # generator styles for the raw train split
    test_styles: tuple = (0, 1, 2, 3, 4, 5)
    lattice_grid: int = 12
    n_test_cells: int = 24
    split_seed: int = 613


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    time_dim: int = 128
    n_steps: int = 50
    pretrain_steps: int = 9000
    pretrain_batch: int = 16
    pretrain_lr: float = 2e-4
    pretrain_pool: int = 6000


@dataclass
class AugmentConfig:
    gamma: float = 0.8
    n_steps: int = 50
    filter_threshold: float = 0.5
    styles: tuple = (1, 2, 3, 4, 5)
    batch_size: int = 16


@dataclass
class ConditioningConfig:
    d_id: int = 64
    d_text: int = 64
    n_id_tokens: int = 4
    n_sty_tokens: int = 4
    projector_layers: int = 3
    patch: int = 4
    pos_encoding: bool = False
    recognizer_identities: int = 96
    recognizer_steps: int = 5000
    recognizer_variants: int = 12
    fitter_steps: int = 8000
    fitter_pool: int = 8000


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    total_steps: int = 20000
    seed: int = 0
    ablation: str = "full"      # full | C1 | C2
    log_every: int = 10
    ckpt_every: int = 2000
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.total_steps <= 0:
            raise ConfigError("train hyperparameters must be positive")
        if self.ablation not in ("full", "C1", "C2"):
            raise ConfigError(f"unknown ablation {self.ablation!r}")


@dataclass
class MetricsConfig:
    featnet_seed: int = 1234
    eval_cases: int = 100
    eval_seed: int = 99
    confidence_floor: float = 0.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return list(v)
            return v
        return {f.name: {g.name: conv(getattr(getattr(self, f.name), g.name))
                         for g in fields(getattr(self, f.name))}
                for f in fields(self)}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}  # type: ignore[misc]


def _build_section(cls, payload: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if isinstance(getattr(cls(), name), tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_from_dict(payload: dict) -> RunConfig:
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, factory in _SECTIONS.items():
        cls = type(factory())
        sections[name] = _build_section(cls, payload.get(name, {}), name)
    return RunConfig(**sections)


def load_config(path: Path) -> RunConfig:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return config_from_dict(payload)


def face_space_spec(cfg: RunConfig):
    from .faces import FaceSpaceSpec
    return FaceSpaceSpec(
        image_size=cfg.data.image_size,
        lattice_grid=cfg.data.lattice_grid,
        n_test_cells=cfg.data.n_test_cells,
        split_seed=cfg.data.split_seed,
    )


def denoiser_config(cfg: RunConfig):
    from .diffusion import DenoiserConfig
    return DenoiserConfig(
        image_size=cfg.data.image_size,
        base_channels=cfg.diffusion.base_channels,
        channel_mults=tuple(cfg.diffusion.channel_mults),
        time_dim=cfg.diffusion.time_dim,
        d_text=cfg.conditioning.d_text,
        n_null_tokens=cfg.conditioning.n_id_tokens,
    )
