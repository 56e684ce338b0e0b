"""Dataclass config tree with JSON round-trip and documented defaults.

The resolved config (defaults merged with any overrides) is persisted verbatim
alongside every run so artifacts are reproducible from the config alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from . import world
from .loop import SailConfig
from .nn import ConfigError


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: tuple[int, ...] = (512, 512)
    t_width: int = 32
    c_width: int = 16
    frames: int = 8


@dataclass(frozen=True)
class EnvConfig:
    """Environment constants. These are part of the contract the scripted
    policies and oracles were validated against; loading different values is
    a configuration error rather than a silent behavior change."""

    horizon: int = world.HORIZON
    contact_radius: float = world.CONTACT_RADIUS
    goal_y: float = world.GOAL_Y
    action_bound: float = world.ACTION_BOUND

    def __post_init__(self):
        if (
            self.horizon != world.HORIZON
            or self.contact_radius != world.CONTACT_RADIUS
            or self.goal_y != world.GOAL_Y
            or self.action_bound != world.ACTION_BOUND
        ):
            raise ConfigError(
                "environment constants are fixed by the build: "
                f"horizon={world.HORIZON}, contact_radius={world.CONTACT_RADIUS}, "
                f"goal_y={world.GOAL_Y}, action_bound={world.ACTION_BOUND}"
            )


@dataclass(frozen=True)
class CorpusConfig:
    demos_per_task: int = 10
    general_demos_per_task: int = 10
    demo_policy: str = "expert"  # expert | suboptimal
    general_y_band: tuple[float, float] = (0.15, 0.55)

    def __post_init__(self):
        if self.demo_policy not in ("expert", "suboptimal"):
            raise ConfigError(f"unknown demo policy {self.demo_policy!r}")


@dataclass(frozen=True)
class IdmConfig:
    frame_skip: int = 4
    hidden: tuple[int, ...] = (256, 256)
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 64


@dataclass(frozen=True)
class TrainConfig:
    theta_steps: int = 6000
    general_steps: int = 9000
    batch: int = 16
    lr: float = 3e-4
    drop_prob: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sail: SailConfig = field(default_factory=SailConfig)
    out: str = "runs"
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=list, sort_keys=True)


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        if is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _SECTIONS):
            section_cls = _SECTIONS[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(section_cls, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "ScheduleConfig": ScheduleConfig,
    "DenoiserConfig": DenoiserConfig,
    "EnvConfig": EnvConfig,
    "CorpusConfig": CorpusConfig,
    "IdmConfig": IdmConfig,
    "TrainConfig": TrainConfig,
    "SailConfig": SailConfig,
}


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults merged with the JSON document at `path` (if given).

    The top-level seed doubles as the loop's master seed unless the document
    sets `sail.master_seed` itself.
    """
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    cfg = _from_dict(RunConfig, data)
    if "master_seed" not in data.get("sail", {}):
        cfg = replace(cfg, sail=replace(cfg.sail, master_seed=cfg.seed))
    return cfg


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """CLI-style overrides; sail-loop fields are routed into the sail section."""
    sail_fields = {f.name for f in fields(SailConfig)}
    sail_updates = {k: v for k, v in overrides.items() if k in sail_fields and v is not None}
    top_updates = {
        k: v for k, v in overrides.items() if k not in sail_fields and v is not None
    }
    if sail_updates:
        cfg = replace(cfg, sail=replace(cfg.sail, **sail_updates))
    if "seed" in top_updates:
        cfg = replace(cfg, sail=replace(cfg.sail, master_seed=top_updates["seed"]))
    if top_updates:
        cfg = replace(cfg, **top_updates)
    return cfg
