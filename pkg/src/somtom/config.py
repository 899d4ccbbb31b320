"""Pipeline configuration: one JSON document, environment overrides, stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError, ValidationError
from .tom import TomConfig
from .tracking import TrackerConfig

STAGES = ("som-ui", "segment", "tom", "encode-robot", "eval-traces")
# settings that cannot change results; left out of the provenance hash
_UNHASHED = ("workers", "out")


@dataclass(frozen=True)
class SegmentationConfig:
    threshold: float = 27.0
    min_len: int = 12
    similarity_threshold: float = 0.25
    filter: bool = False
    scores: str | None = None
    video_root: str | None = None


@dataclass(frozen=True)
class CodecConfig:
    vocab: int = 32000
    stats: str | None = None
    tom_horizon: int | None = None


@dataclass(frozen=True)
class EvalConfig:
    horizon_s: float = 1.0
    fps: float | None = None
    per_clip: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[str, ...] = STAGES
    tom: TomConfig = field(default_factory=TomConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    workers: int = 1
    out: str = "out"
    fail_budget: float = 0.01

    def __post_init__(self):
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 <= self.fail_budget <= 1:
            raise ConfigError("fail_budget must be within [0, 1]")
        if self.tracker.grid_size != self.tom.s:
            object.__setattr__(self, "tracker", dataclasses.replace(self.tracker, grid_size=self.tom.s))

    def to_json(self) -> dict:
        data = dataclasses.asdict(self)
        data["stages"] = list(self.stages)
        return data

    @property
    def hash(self) -> str:
        data = {k: v for k, v in self.to_json().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, data: dict) -> PipelineConfig:
        sections = {
            "tom": TomConfig,
            "tracker": TrackerConfig,
            "segmentation": SegmentationConfig,
            "codec": CodecConfig,
            "eval": EvalConfig,
        }
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sections:
                sub = sections[key]
                names = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                try:
                    kwargs[key] = sub(**value)
                except (TypeError, ValidationError) as exc:
                    raise ConfigError(f"bad {key!r} section: {exc}") from None
            elif key == "stages":
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def load_config(
    path: str | None = None,
    env: dict | None = None,
    **overrides,
) -> PipelineConfig:
    """Defaults, then the config file, then SOMTOM_* variables, then explicit overrides."""
    data: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    env = os.environ if env is None else env
    for var, key in (("SOMTOM_SEED", "seed"), ("SOMTOM_WORKERS", "workers")):
        if env.get(var):
            try:
                data[key] = int(env[var])
            except ValueError:
                raise ConfigError(f"{var} must be an integer, got {env[var]!r}") from None
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return PipelineConfig.from_json(data)


def derive_seed(seed: int, record_id: str) -> int:
    """Per-record seed: global seed XOR a stable hash of the record id."""
    digest = hashlib.sha256(record_id.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "big")) & ((1 << 63) - 1)
