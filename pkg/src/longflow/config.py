"""Run configuration: one versioned JSON document covering every stage."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .flowcore import FieldConfig
from .orchestrator import GenerationPlan
from .scheduler import JDCParams, TPDConfig
from .toyworld import WorldConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    num_episodes: int = 128
    steps_per_episode: int = 200

    def __post_init__(self):
        if self.num_episodes < 1 or self.steps_per_episode < 2:
            raise ValueError("need at least one episode of two or more steps")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "mlp"
    hidden: int = 256
    cond_hidden: int = 128
    num_frequencies: int = 8
    mix_dim: int = 16
    channels: int = 8
    delta: float = 0.02


@dataclass(frozen=True)
class TPDSection:
    omega: float = math.pi / 2
    enabled: bool = True


@dataclass(frozen=True)
class EvalConfig:
    num_seeds: int = 5
    episodes_per_seed: int = 8
    window: int = 24
    num_features: int = 32
    feature_seed: int = 0
    min_samples: int = 100
    reference_episodes: int = 64
    episode_seed_base: int = 1_000_000

    def __post_init__(self):
        if self.num_seeds < 1 or self.episodes_per_seed < 1 or self.window < 1:
            raise ValueError("num_seeds, episodes_per_seed and window must be >= 1")


_SECTIONS = {
    "world": WorldConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "tpd": TPDSection,
    "jdc": JDCParams,
    "plan": GenerationPlan,
    "eval": EvalConfig,
}
# the plan's seed always comes from the top-level seed
_EXCLUDED = {"plan": {"seed"}}


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tpd: TPDSection = field(default_factory=TPDSection)
    jdc: JDCParams = field(default_factory=JDCParams)
    plan: GenerationPlan = field(default_factory=GenerationPlan)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.plan.num_views != self.world.num_views:
            raise ConfigError("plan.num_views must equal world.num_views")
        if self.plan.high_fps != self.world.base_fps or self.train.high_fps != self.world.base_fps:
            raise ConfigError("plan.high_fps and train.high_fps must equal world.base_fps")

    # derived objects -----------------------------------------------------

    def tpd_config(self) -> TPDConfig:
        return TPDConfig(omega=self.tpd.omega, num_noisy_frames=self.plan.num_noisy,
                         num_steps=self.plan.num_steps, enabled=self.tpd.enabled)

    def field_config(self) -> FieldConfig:
        w = self.world
        return FieldConfig(frame_dim=w.num_views * w.frame_size**2, num_views=w.num_views,
                           frame_size=w.frame_size, **dataclasses.asdict(self.model))

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else dataclasses.replace(self, seed=seed)

    def generation_plan(self, **changes) -> GenerationPlan:
        return dataclasses.replace(self.plan, **{"seed": self.seed, **changes})

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"version": CONFIG_VERSION}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            for key in _EXCLUDED.get(name, ()):
                section.pop(key)
            out[name] = section
        out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        for key in doc:
            if key not in _SECTIONS and key not in ("version", "seed"):
                raise ConfigError(f"unknown config key {key!r}")
        kwargs: dict[str, Any] = {}
        for name, kind in _SECTIONS.items():
            if name in doc:
                kwargs[name] = _build(kind, doc[name], name)
        if "seed" in doc:
            seed = doc["seed"]
            if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
                raise ConfigError(f"'seed' must be a non-negative integer, got {seed!r}")
            kwargs["seed"] = seed
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _build(kind, section, prefix: str):
    if not isinstance(section, dict):
        raise ConfigError(f"'{prefix}' must be a JSON object")
    known = {f.name for f in dataclasses.fields(kind)} - _EXCLUDED.get(prefix, set())
    defaults = kind()
    kwargs = {}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}.{key}'")
        default = getattr(defaults, key)
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"'{prefix}.{key}' must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{prefix}.{key}' must be a number")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"'{prefix}.{key}' must be an integer")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"'{prefix}.{key}' must be a string")
        kwargs[key] = value
    try:
        return kind(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{prefix}' section: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def save_config(path: str | Path, config: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
