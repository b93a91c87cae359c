"""Run configuration: a JSON document whose sections map onto the library's dataclasses.

Unknown keys are rejected at every level and every section is range-checked by
the dataclass it builds. ``RunConfig.digest`` hashes the canonical JSON form
and names the run directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .agent.config import AgentConfig
from .plant import PlantParams, VehicleParams
from .scenario import DriveConfig
from .tsenv import EnvConfig, EvalConfig

__all__ = ["ConfigError", "TrainSettings", "RunConfig"]

MODES = ("single", "parallel")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    n_envs: int = 4
    n_episodes: int = 150
    stabilization_window: int = 15

    def __post_init__(self):
        if self.n_envs < 1 or self.n_episodes < 1 or self.stabilization_window < 1:
            raise ValueError("n_envs, n_episodes and stabilization_window must be >= 1")


def _build(cls, data, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    kw = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        if isinstance(val, list):
            val = tuple(val)
        kw[f.name] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from None


def _plain(obj) -> dict:
    d = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    plant: PlantParams = PlantParams()
    vehicle: VehicleParams = VehicleParams()
    eval: EvalConfig = EvalConfig()
    drive: DriveConfig = DriveConfig()
    env: dict = field(default_factory=lambda: {"episode_length": 125, "scenario_batch": 16,
                                               "p_edge": 0.05, "shadow_baseline": True})
    agent: AgentConfig = AgentConfig()
    train: TrainSettings = TrainSettings()
    stats: str = "bundled:all"      # layer-statistics file, or bundled:<climate> usage data
    seed: int = 0
    output_dir: str = "tmtune-runs"
    mode: str = "single"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.stats, str) or not self.stats:
            raise ConfigError("stats must be a path or 'bundled:<climate>'")
        self.env_config()

    def env_config(self) -> EnvConfig:
        env = dict(self.env)
        unknown = set(env) - {"episode_length", "scenario_batch", "p_edge", "shadow_baseline"}
        if unknown:
            raise ConfigError(f"unknown keys in 'env': {sorted(unknown)}")
        try:
            return EnvConfig(eval=self.eval, drive=self.drive, **env)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'env': {exc}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kw = {}
        sections = {"plant": PlantParams, "vehicle": VehicleParams, "eval": EvalConfig,
                    "drive": DriveConfig, "agent": AgentConfig, "train": TrainSettings}
        for name, cls_ in sections.items():
            if name in d:
                kw[name] = _build(cls_, d[name], name)
        if "env" in d:
            if not isinstance(d["env"], dict):
                raise ConfigError("section 'env' must be an object")
            kw["env"] = {**cls().env, **d["env"]}
        for name in ("stats", "seed", "output_dir", "mode"):
            if name in d:
                kw[name] = d[name]
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"plant": _plain(self.plant), "vehicle": _plain(self.vehicle),
                "eval": _plain(self.eval), "drive": _plain(self.drive), "env": dict(self.env),
                "agent": _plain(self.agent), "train": _plain(self.train), "stats": self.stats,
                "seed": self.seed, "output_dir": self.output_dir, "mode": self.mode}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            text = fh.read()
        try:
            return cls.loads(text)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @property
    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def smoke(cls, **kw) -> "RunConfig":
        """Liveness configuration: 4 environments, 25 steps, 40 episodes, tiny networks."""
        base = dict(env={"episode_length": 25, "scenario_batch": 4, "p_edge": 0.05,
                         "shadow_baseline": False},
                    agent=AgentConfig.desk(batch_size=16, warmup=64, context_hidden=(8, 8),
                                           z_context=8, lstm_hidden=8, critic_hidden=(32, 32),
                                           critic_updates=1, actor_updates=1),
                    train=TrainSettings(n_envs=4, n_episodes=40),
                    eval=EvalConfig(n_window=32))
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "RunConfig":
        """The scaled-down training experiment: 4 environments, 25 steps, 150 episodes."""
        base = dict(env={"episode_length": 25, "scenario_batch": 16, "p_edge": 0.05,
                         "shadow_baseline": True},
                    agent=AgentConfig.desk(), train=TrainSettings(n_envs=4, n_episodes=150))
        base.update(kw)
        return cls(**base)
