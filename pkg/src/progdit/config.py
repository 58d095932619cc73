"""Run configuration: nested frozen dataclasses serialized as one JSON document.

Unknown keys are rejected at every level so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import ModelConfig
from .codec import CodecConfig
from .conditioning import TextConfig
from .sampler import SamplerConfig
from .schedule import ScheduleConfig
from .trainer import TrainConfig


class ConfigValidationError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    subjects: int = 100
    visits_per_subject: int = 6
    image_size: int = 64
    noise: float = 0.01
    missing_rate: float = 0.1
    reversion_rate: float = 0.1
    train_fraction: float = 0.8
    all_pairs: bool = False
    histogram_match: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.subjects < 1 or self.visits_per_subject < 1:
            raise ConfigValidationError("subjects and visits_per_subject must be >= 1")
        if self.image_size % 8:
            raise ConfigValidationError(f"image_size {self.image_size} must be divisible by 8")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigValidationError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    max_pairs: int = 0  # 0 = every pair in the split
    save_error_maps: bool = False
    baseline_compare: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=1e-3))
    codec: CodecConfig = field(default_factory=CodecConfig)
    text: TextConfig = field(default_factory=TextConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def override(self, section: str, **values) -> RunConfig:
        cur = getattr(self, section)
        return dataclasses.replace(self, **{section: dataclasses.replace(cur, **values)})


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigValidationError(f"{where}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigValidationError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}")
        elif typing.get_origin(hint) is tuple:
            kwargs[name] = tuple(value)
        elif hint is float and isinstance(value, int) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(f"{where}: {exc}") from exc
