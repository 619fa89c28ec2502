"""Run configuration and its ``key = value`` text format.

One setting per line, ``#`` starts a comment, tuples are comma separated::

    mode = MEBE
    seed = 3
    forward_hidden = 256,256
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .env import EnvParams
from .explore import MODES, ExplorationConfig


class ConfigError(ValueError):
    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


@dataclass
class RunConfig:
    mode: str = "MEBE"
    seed: int = 0
    total_steps: int = 100_000
    workers: int = 16
    steps_per_update: int = 10
    grad_steps_per_update: int = 10
    policy_delay: int = 2
    random_steps: int = 1000
    batch_size: int = 512
    buffer_capacity: int = 500_000
    goal_capacity: int = 10_000
    gamma: float = 0.98
    d: int = 16
    ortho_coef: float = 100.0
    fz_coef: float = 0.1
    lam_reg: float = 20.0
    # exploration
    beta: float = 2.0
    epsilon: float = 0.1
    goal_fraction: float = 0.8
    pool_size: int = 1024
    z_refresh: int = 100
    # density model
    flow_refresh: int = 1000
    flow_layers: int = 10
    flow_hidden: int = 64
    flow_epochs: int = 30
    flow_lr: float = 1e-3
    flow_batch: int = 256
    # optimisation
    lr_forward: float = 1e-3
    lr_backward: float = 1e-3
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    tau_forward: float = 0.01
    tau_backward: float = 0.01
    tau_actor: float = 0.01
    tau_critic: float = 0.005
    forward_hidden: tuple[int, ...] = (256, 256)
    backward_hidden: tuple[int, ...] = (128, 128)
    actor_hidden: tuple[int, ...] = (256, 256)
    critic_hidden: tuple[int, ...] = (256, 256)
    action_noise: float = 0.2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    # metrics and evaluation
    entropy_window: int = 50_000
    entropy_bins: int = 20
    infer_samples: int = 10_000
    eval_episodes: int = 10
    checkpoint_interval: int = 10_000
    # environment
    dt: float = 0.05
    accel_scale: float = 4.0
    drag: float = 0.5
    v_max: float = 2.0
    p_max: float = 5.0
    episode_length: int = 250

    def __post_init__(self):
        bad = []
        if self.mode not in MODES:
            bad.append("mode")
        for name in (
            "workers", "steps_per_update", "grad_steps_per_update", "policy_delay",
            "batch_size", "buffer_capacity", "goal_capacity", "d", "flow_refresh",
            "z_refresh", "pool_size", "flow_epochs", "flow_batch", "episode_length",
            "checkpoint_interval",
        ):
            if getattr(self, name) < 1:
                bad.append(name)
        if self.total_steps < 0 or self.random_steps < 0:
            bad.append("total_steps" if self.total_steps < 0 else "random_steps")
        if self.d < 2:
            bad.append("d")
        if not 0 < self.gamma < 1:
            bad.append("gamma")
        if self.lam_reg < 0:
            bad.append("lam_reg")
        if bad:
            raise ConfigError(f"invalid values for: {', '.join(bad)}", bad)
        if self.mode == "FB":
            self.lam_reg = 0.0
        self.exploration()  # validates the exploration fields

    @property
    def uses_critic(self) -> bool:
        return self.mode != "FB"

    def exploration(self) -> ExplorationConfig:
        try:
            return ExplorationConfig(
                self.mode, self.beta, self.epsilon, self.goal_fraction, self.pool_size, self.z_refresh
            )
        except ValueError as exc:
            raise ConfigError(str(exc), ["beta", "epsilon", "goal_fraction"]) from exc

    def env_params(self) -> EnvParams:
        return EnvParams(self.dt, self.accel_scale, self.drag, self.v_max, self.p_max, self.episode_length)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown keys: {', '.join(unknown)}", unknown)
        values = {}
        for f in fields(cls):
            if f.name in data:
                values[f.name] = _coerce(f, data[f.name])
        return cls(**values)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("tuple"):
            if isinstance(value, str):
                return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
            return tuple(int(v) for v in value)
        if kind == "int":
            if isinstance(value, str):
                value = value.replace("_", "")
                as_float = float(value)
                if not as_float.is_integer():
                    raise ValueError(value)
                return int(as_float)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {f.name}: {value!r}", [f.name]) from exc


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    data = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        data[key] = value
    return data


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        data.update(parse_config_text(Path(path).read_text()))
    data.update(overrides or {})
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg))
