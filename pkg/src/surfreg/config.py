"""Pipeline configuration: a YAML key-value tree validated fail-closed
against the dataclass schemas, with dotted-key command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .masking import SegConfig
from .registration import RegConfig


@dataclass(frozen=True)
class SourceConfig:
    """Where frames come from: a recorded stream on disk, or the built-in
    synthetic torso scene."""

    kind: str = "synthetic"  # "synthetic" | "recording"
    path: str = ""  # recording directory (kind="recording")
    frames: int = 20
    noise_sigma: float = 0.0
    noise_model: str = "constant"  # "constant" | "quadratic"
    distance: float = 1.0
    span_deg: float = 300.0
    elevation_deg: float = 40.0
    look_offset: float = 0.0  # orbit-center shift along the target's long axis
    distractor: bool = True

    def __post_init__(self):
        if self.kind not in ("synthetic", "recording"):
            raise ConfigError(f"source.kind must be 'synthetic' or 'recording', got '{self.kind}'")
        if self.kind == "recording" and not self.path:
            raise ConfigError("source.path is required when source.kind is 'recording'")
        if self.frames < 1:
            raise ConfigError("source.frames must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("source.noise_sigma must be >= 0")
        if self.noise_model not in ("constant", "quadratic"):
            raise ConfigError(f"unknown source.noise_model '{self.noise_model}'")


@dataclass(frozen=True)
class FusionConfig:
    delta_send: float = 0.01
    delta_map: float = 0.01

    def __post_init__(self):
        if self.delta_send <= 0 or self.delta_map <= 0:
            raise ConfigError("fusion voxel sizes must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_dir: str = "out"
    segmenter: str = "oracle"  # "oracle" | "service:<url>"
    register_every: int = 5  # registration cadence in frames
    source: SourceConfig = field(default_factory=SourceConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    registration: RegConfig = field(default_factory=RegConfig)

    def __post_init__(self):
        if self.register_every < 1:
            raise ConfigError("register_every must be >= 1")
        if self.segmenter != "oracle" and not self.segmenter.startswith("service:"):
            raise ConfigError(
                f"segmenter must be 'oracle' or 'service:<url>', got '{self.segmenter}'"
            )


_SECTIONS = {
    "source": SourceConfig,
    "fusion": FusionConfig,
    "segmentation": SegConfig,
    "registration": RegConfig,
}


def _coerce(value, typ, key: str):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be true/false, got {value!r}")
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string, got {value!r}")
        return value
    return value


def _build_section(cls, data: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        f = known[key]
        typ = f.type if isinstance(f.type, type) else {"float": float, "int": int,
                                                       "str": str, "bool": bool}.get(f.type, None)
        kwargs[key] = _coerce(value, typ, f"{prefix}{key}")
    try:
        return cls(**kwargs)
    except Exception as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid values in section '{prefix.rstrip('.') or 'root'}': {e}") from e


def config_from_dict(data: dict) -> PipelineConfig:
    """Builds a validated PipelineConfig; any key not in the schema is an
    error naming the offending key."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = {f.name for f in fields(PipelineConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key '{key}'")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be a mapping")
            kwargs[key] = _build_section(_SECTIONS[key], value, f"{key}.")
        else:
            f = next(f for f in fields(PipelineConfig) if f.name == key)
            typ = f.type if isinstance(f.type, type) else {"float": float, "int": int,
                                                           "str": str, "bool": bool}.get(f.type, None)
            kwargs[key] = _coerce(value, typ, key)
    try:
        return PipelineConfig(**kwargs)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"invalid config: {e}") from e


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return config_from_dict(data)


def _parse_override_value(raw: str):
    return yaml.safe_load(raw)


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Applies dotted-key overrides (e.g. 'registration.prune_to=2') on
    top of a config; overrides win over file values."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = _parse_override_value(raw)
    return config_from_dict(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = dataclasses.asdict(cfg)
    return out
