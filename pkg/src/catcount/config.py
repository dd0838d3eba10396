"""Run configuration: TOML ``key = value`` files layered over built-in defaults.

Defaults carry the published training values; :func:`desk_profile` shrinks the
schedules so the whole pipeline trains on a laptop-sized synthetic corpus.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .density import KernelConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    saddle_escape: bool = False


@dataclass
class SaddleConfig:
    window: int = 15
    rel_threshold: float = 1e-4
    escape_lr: float = 5e-4
    escape_duration: int = 5


@dataclass
class LossConfig:
    sigma_crowd: float = 3.5e4
    sigma_regression_aux: float = 3.5e2
    sigma_stand: float = 3.5e4
    sigma_sit: float = 1.2 * 3.5e4

    def validate(self) -> None:
        for name in ("sigma_crowd", "sigma_sit", "sigma_stand"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"loss.{name} must be > 0")
        if self.sigma_regression_aux < 0:
            raise ConfigError("loss.sigma_regression_aux must be >= 0")
        if self.sigma_sit <= self.sigma_stand:
            raise ConfigError("loss.sigma_sit must exceed loss.sigma_stand")


@dataclass
class ModelConfig:
    regression_widths: tuple[int, ...] = (20, 40, 20, 10)
    mask_net_widths: tuple[int, ...] = (16, 16, 16, 8, 2)
    branch_widths: tuple[int, ...] = (20, 20, 20, 10, 2)


@dataclass
class Config:
    seed: int = 0
    precision: str = "single"
    margin: float = 0.15
    kernel: KernelConfig = field(default_factory=KernelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    saddle: SaddleConfig = field(default_factory=SaddleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(8e-3, 10000, 512))
    phase2: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(1e-6, 1500, 64, saddle_escape=True))
    phase3_pre: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(1e-5, 1000, 64))
    phase3_joint: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(1e-6, 1000, 64))

    def schedule(self, phase: str) -> ScheduleConfig:
        return {"1": self.phase1, "2": self.phase2, "3-pre": self.phase3_pre, "3-joint": self.phase3_joint}[phase]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {
    "kernel": KernelConfig,
    "loss": LossConfig,
    "saddle": SaddleConfig,
    "model": ModelConfig,
    "phase1": ScheduleConfig,
    "phase2": ScheduleConfig,
    "phase3_pre": ScheduleConfig,
    "phase3_joint": ScheduleConfig,
}


def _coerce(value: Any, current: Any, where: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return tuple(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def apply_overrides(cfg: Config, data: dict[str, Any]) -> Config:
    """Return a copy of ``cfg`` with the nested mapping ``data`` applied; unknown keys raise."""
    updates: dict[str, Any] = {}
    sigma_sit_given = False
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            known = {f.name for f in dataclasses.fields(section)}
            changes = {}
            for sub, v in value.items():
                if sub not in known:
                    raise ConfigError(f"unknown key {key}.{sub}")
                changes[sub] = _coerce(v, getattr(section, sub), f"{key}.{sub}")
            if key == "loss" and "sigma_sit" in changes:
                sigma_sit_given = True
            updates[key] = dataclasses.replace(section, **changes)
        elif key in ("seed", "precision", "margin"):
            updates[key] = _coerce(value, getattr(cfg, key), key)
        else:
            raise ConfigError(f"unknown key {key}")
    out = dataclasses.replace(cfg, **updates)
    loss = out.loss
    if "loss" in updates and not sigma_sit_given and "sigma_stand" in data["loss"]:
        # keep the sitting weight tied to the standing one unless set explicitly
        out = dataclasses.replace(out, loss=dataclasses.replace(loss, sigma_sit=1.2 * loss.sigma_stand))
    validate(out)
    return out


def validate(cfg: Config) -> None:
    if cfg.precision not in ("single", "double"):
        raise ConfigError(f"precision must be 'single' or 'double', got {cfg.precision!r}")
    if not 0 <= cfg.margin <= 0.5:
        raise ConfigError(f"margin must be in [0, 0.5], got {cfg.margin}")
    cfg.loss.validate()
    for name in ("phase1", "phase2", "phase3_pre", "phase3_joint"):
        s = getattr(cfg, name)
        if s.learning_rate <= 0 or s.epochs < 1 or s.batch_size < 1:
            raise ConfigError(f"{name}: learning_rate, epochs and batch_size must be positive")
    sd = cfg.saddle
    if sd.window < 1 or sd.escape_duration < 1 or sd.escape_lr <= 0 or sd.rel_threshold <= 0:
        raise ConfigError("saddle: window, escape_duration, escape_lr and rel_threshold must be positive")


def load_config(path: str | os.PathLike | None = None, base: Config | None = None) -> Config:
    cfg = base or Config()
    if path is None:
        return cfg
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return apply_overrides(cfg, data)


def desk_profile() -> Config:
    """Reduced schedules with learning rates that make progress in few epochs."""
    return apply_overrides(
        Config(),
        {
            "phase1": {"learning_rate": 8e-3, "epochs": 1500, "batch_size": 512},
            "phase2": {"learning_rate": 2e-3, "epochs": 300, "batch_size": 8, "saddle_escape": True},
            "phase3_pre": {"learning_rate": 2e-3, "epochs": 200, "batch_size": 8},
            "phase3_joint": {"learning_rate": 1e-3, "epochs": 200, "batch_size": 8},
            "saddle": {"escape_lr": 5e-3},
        },
    )
