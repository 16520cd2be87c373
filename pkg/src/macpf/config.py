"""Flat ``key = value`` experiment configs with comments and command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .agents import POLICY_OBJECTIVES, AgentConfig, MixerSpec
from .envs import make_env

VARIANTS = ("macpf", "macpf_control", "mixer_nonlinear")
ENVS = ("matrix_game", "point_mass")
TEMPERATURE_MODES = ("tail", "mixer", "shared")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "matrix_game"
    variant: str = "macpf"
    seeds: tuple = (0,)
    episodes: int = 20000
    eval_interval: int = 500
    eval_episodes: int = 200
    evaluate_extracted: bool = True  # also evaluate the product policy extracted from the dependent one
    lr: float = 3e-4
    batch_size: int = 64
    buffer_capacity: int = 50000
    target_interval: int = 200
    alpha_init: float = 1.0
    alpha_final: float = 0.5
    alpha_decay: float = 0.999
    hidden: int = 64
    correction_hidden: int = 64
    hyper_hidden: int = 64
    mixer_embed: int = 32
    zero_init_corrections: bool = False
    chain_consistency: float = 1.0  # weight of the critic chain-consistency term; 0 disables
    local_temperature: str = "tail"  # tail | mixer | shared
    policy_objective: str = "forward"  # forward | reverse KL projection of the local policies
    updates_per_episode: int = 1
    updates_per_step: int = 0  # >0 switches to updates after every environment step
    warmup_steps: int = 0
    workers: int = 1
    output_dir: str = "runs/default"
    # point-mass geometry
    pm_sigma: float = 1.0
    pm_peak: float = 1.0
    pm_step_size: float = 0.5
    pm_half_width: float = 7.0
    pm_horizon: int = 50
    pm_start_spread: float = 1.0
    pm_gamma: float = 0.95

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; expected one of {', '.join(ENVS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for name in ("episodes", "eval_interval", "eval_episodes", "batch_size", "buffer_capacity",
                     "target_interval", "hidden", "correction_hidden", "hyper_hidden", "mixer_embed", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.local_temperature not in TEMPERATURE_MODES:
            raise ConfigError(f"unknown local_temperature {self.local_temperature!r}; "
                              f"expected one of {', '.join(TEMPERATURE_MODES)}")
        if self.policy_objective not in POLICY_OBJECTIVES:
            raise ConfigError(f"unknown policy_objective {self.policy_objective!r}; "
                              f"expected one of {', '.join(POLICY_OBJECTIVES)}")
        if self.chain_consistency < 0:
            raise ConfigError("chain_consistency must be nonnegative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (self.alpha_init > 0 and self.alpha_final > 0 and 0 < self.alpha_decay <= 1):
            raise ConfigError("temperatures must be positive and alpha_decay in (0, 1]")

    # --- (de)serialization ---

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, overrides=()) -> "ExperimentConfig":
        raw = parse_pairs(text)
        for item in overrides:
            key, value = _split_pair(item, "override")
            raw[key] = value
        return cls.from_pairs(raw)

    @classmethod
    def from_pairs(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value, cls.__dataclass_fields__[key].default)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(), overrides)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _split_pair(line: str, what: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"malformed {what} {line!r}; expected key=value")
    key, value = line.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"malformed {what} {line!r}; empty key")
    return key, value.strip()


def parse_pairs(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = _split_pair(line, "line")
        except ConfigError as exc:
            raise ConfigError(f"line {n}: {exc}") from None
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key!r}") from None
    return value


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package (``matrix_game``, ``point_mass``)."""
    fname = name if name.endswith(".cfg") else f"{name}.cfg"
    return Path(str(resources.files("macpf") / "configs" / fname))


def resolve_config_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = bundled_config_path(ref)
    if bundled.exists():
        return bundled
    raise ConfigError(f"config {ref!r} not found")


def make_env_from_config(config: ExperimentConfig):
    if config.env == "matrix_game":
        return make_env("matrix_game")
    return make_env(
        "point_mass", sigma=config.pm_sigma, peak=config.pm_peak, step_size=config.pm_step_size,
        half_width=config.pm_half_width, horizon=config.pm_horizon, start_spread=config.pm_start_spread,
        gamma=config.pm_gamma,
    )


def agent_config_for(config: ExperimentConfig, env) -> AgentConfig:
    mixer = MixerSpec("nonlinear" if config.variant == "mixer_nonlinear" else "linear",
                      config.hyper_hidden, config.mixer_embed)
    return AgentConfig(
        actions_per_agent=tuple(env.actions_per_agent), obs_dim=env.obs_dim, state_dim=env.state_dim,
        hidden=config.hidden, correction_hidden=config.correction_hidden, mixer=mixer,
        enable_dependency=config.variant != "macpf_control",
        zero_init_corrections=config.zero_init_corrections,
    )
