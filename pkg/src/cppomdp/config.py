"""Run configuration.

The on-disk format is a flat YAML mapping.  Scenario keys (``map_size``,
``num_buoys``, ``K_p``, ``rho``, ``lambda``, ...) describe the task and its
training budget; everything else is an implementation knob with a documented
default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

TASKS = ("debris", "muling")
STRATEGIES = ("rc", "cc", "oc", "cjcc", "djcc")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class TaskConfig:
    task: str = "debris"
    map_size: int = 12
    steps_per_episode: int = 100  # K
    K_p: int = 5
    rho: float = 1.0
    sigma: float = 0.22
    eta: float = 1.0
    v_robot: float = 2.0
    num_buoys: int = 9
    num_areas: int = 9
    # muling only; 0 turns the task into an empty map with a goal
    n_targets: int = 2
    # distributed field of view: "block" (the area partition) or "radius"
    fov_mode: str = "block"
    sensor_radius: float = 2.0
    # linear ramp of the intermediate reward from sigma (bottom row) to 2*sigma (top row)
    sigma_ramp: bool = False
    # OC refreshes the belief on every slot instead of only on communication slots
    oc_every_slot: bool = False

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.map_size < 4:
            raise ConfigError("map_size must be >= 4")
        if self.task == "debris" and self.map_size % 2:
            raise ConfigError("debris walls need an even map_size")
        if self.steps_per_episode < 1:
            raise ConfigError("steps_per_episode must be >= 1")
        if self.K_p <= 0:
            raise ConfigError("K_p must be positive")
        if not (self.rho > self.sigma > 0):
            raise ConfigError("need rho > sigma > 0")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.v_robot < 1:
            raise ConfigError("v_robot must be >= 1")
        if not 0 <= self.n_targets <= 2:
            raise ConfigError("n_targets must be in 0..2")
        if self.fov_mode not in ("block", "radius"):
            raise ConfigError("fov_mode must be 'block' or 'radius'")
        side = round(self.num_areas ** 0.5)
        if side * side != self.num_areas or self.map_size % side:
            raise ConfigError(
                f"num_areas={self.num_areas} must be a square whose root divides map_size={self.map_size}"
            )
        if self.num_buoys not in (1, self.num_areas):
            raise ConfigError("num_buoys must be 1 or equal to num_areas")

    @property
    def age_sentinel(self) -> int:
        return self.steps_per_episode + 1


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.95  # "lambda" in the YAML file
    zeta: float = 1e-5
    eps_start: float = 0.9
    eps_end: float = 0.1
    batch_size: int = 32
    target_sync: int = 1000
    buffer_capacity: int = 100_000
    sensor_buffer_capacity: int = 50_000
    # one gradient update per this many stored transitions
    train_every: int = 4
    # same knob for sensor agents; 0 means "use train_every"
    sensor_train_every: int = 0
    warmup: int = 1000

    def __post_init__(self) -> None:
        if not 0 <= self.gamma < 1:
            raise ConfigError("lambda must lie in [0, 1)")
        if self.zeta <= 0:
            raise ConfigError("zeta must be positive")
        if not (0.0 <= self.eps_end <= self.eps_start <= 1.0):
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("batch_size", "target_sync", "buffer_capacity", "sensor_buffer_capacity", "train_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sensor_train_every < 0:
            raise ConfigError("sensor_train_every must be >= 0")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")


@dataclass(frozen=True)
class TrainingSchedule:
    n_round: int = 2
    n_train_robot: int = 100_000
    n_train_sensor: int = 500_000
    n_test: int = 10_000
    initial_sensor_strategy: str = "cc"
    reset_each_phase: bool = True

    def __post_init__(self) -> None:
        if self.n_round < 0 or self.n_train_robot < 0 or self.n_train_sensor < 0 or self.n_test < 0:
            raise ConfigError("episode counts must be non-negative")
        if self.initial_sensor_strategy not in ("rc", "cc"):
            raise ConfigError("initial_sensor_strategy must be 'rc' or 'cc'")

    @property
    def total_robot_episodes(self) -> int:
        return self.n_train_robot * (self.n_round + 1)

    @property
    def total_sensor_episodes(self) -> int:
        return self.n_train_sensor * self.n_round


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    strategy: str = "cc"
    seed: int = 0
    # episodes simulated in lockstep per batch
    wave_size: int = 32
    # test episodes whose full slot logs are exported
    log_episodes: int = 10

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.wave_size < 1:
            raise ConfigError("wave_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def replace(self, **changes: Any) -> "RunConfig":
        """Return a copy with flat-key overrides applied."""
        flat = self.to_mapping()
        flat.update(changes)
        return RunConfig.from_mapping(flat)

    # flat <-> nested mapping -------------------------------------------------
    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for part in (self.task, self.learner, self.schedule):
            for f in fields(part):
                out[_FILE_NAME.get(f.name, f.name)] = getattr(part, f.name)
        for name in ("strategy", "seed", "wave_size", "log_episodes"):
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = {_FIELD_NAME.get(k, k): v for k, v in dict(data).items()}
        parts: dict[str, dict[str, Any]] = {"task": {}, "learner": {}, "schedule": {}, "top": {}}
        for key, value in data.items():
            owner = _OWNER.get(key)
            if owner is None:
                raise ConfigError(f"unknown config key {key!r}")
            parts[owner][key] = value
        try:
            return cls(
                task=TaskConfig(**_coerce(TaskConfig, parts["task"])),
                learner=LearnerConfig(**_coerce(LearnerConfig, parts["learner"])),
                schedule=TrainingSchedule(**_coerce(TrainingSchedule, parts["schedule"])),
                **_coerce(cls, parts["top"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


_FILE_NAME = {"gamma": "lambda"}
_FIELD_NAME = {v: k for k, v in _FILE_NAME.items()}
_OWNER: dict[str, str] = {}
for _owner, _cls in (("task", TaskConfig), ("learner", LearnerConfig), ("schedule", TrainingSchedule)):
    for _f in fields(_cls):
        _OWNER[_f.name] = _owner
for _name in ("strategy", "seed", "wave_size", "log_episodes"):
    _OWNER[_name] = "top"


def _coerce(cls: type, values: dict[str, Any]) -> dict[str, Any]:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        kind = types[key]
        try:
            if kind in ("int", int):
                if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                    raise ValueError
                value = int(value)
            elif kind in ("float", float):
                value = float(value)
            elif kind in ("bool", bool):
                if not isinstance(value, bool):
                    raise ValueError
            elif kind in ("str", str):
                value = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        out[key] = value
    return out


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Read a YAML config file (or defaults when ``path`` is None) and apply overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a key/value mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_mapping(), sort_keys=True)
