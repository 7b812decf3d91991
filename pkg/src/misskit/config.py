"""Run configuration shared by the command-line workflows.

A :class:`RunConfig` is a nested set of frozen dataclasses that round-trips
through a single JSON file.  Unknown keys are rejected at every level so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .backbone import TrackerConfig
from .compensation import STRATEGIES
from .errors import ConfigurationError
from .prompter import PrompterConfig
from .training import TrainConfig

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    """Synthetic data used by the training demo and its evaluation."""
    train_sequences: int = 200
    frames_per_sequence: int = 2
    difficulty: float = 0.0
    data_seed: int = 1
    eval_sequences: int = 20
    eval_length: int = 30
    eval_seed: int = 90000

    def __post_init__(self):
        if self.train_sequences < 1 or self.frames_per_sequence < 1:
            raise ConfigurationError("need at least one training sequence and frame")
        if self.eval_length < 2:
            raise ConfigurationError("evaluation sequences need at least two frames")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigurationError("difficulty must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    strategy: str = "copy"
    lambda_a: float = 1.0
    lambda_b: float = 0.5
    sm_blocks: int = 4
    pr_threshold: float = 20.0
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    prompter: PrompterConfig = field(default_factory=PrompterConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=2000, lr=4e-4, backbone_lr=4e-4))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(steps=800, lr=1e-3, batch_size=8))
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        if self.sm_blocks < 1:
            raise ConfigurationError("sm_blocks must be >= 1")
        if self.lambda_a < 0 or self.lambda_b < 0:
            raise ConfigurationError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build from a (possibly partial) dict; missing keys keep the RunConfig defaults."""
        if not isinstance(data, dict):
            raise ConfigurationError(f"config: expected an object, got {type(data).__name__}")
        return _from_plain(cls, _merge(cls().to_dict(), data), "config")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)

    def hash(self) -> str:
        """SHA-256 of the canonical (sorted, compact) JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _from_plain(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _from_plain(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


_NESTED = {
    (RunConfig, "tracker"): TrackerConfig,
    (RunConfig, "prompter"): PrompterConfig,
    (RunConfig, "stage1"): TrainConfig,
    (RunConfig, "stage2"): TrainConfig,
    (RunConfig, "data"): DataConfig,
}
