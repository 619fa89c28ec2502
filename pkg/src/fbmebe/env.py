"""Planar point-mass with velocity-tracking tasks.

The state vector is ``[px, py, vx, vy, ax_prev, ay_prev]``. Every function
accepts a single state or a batch (leading axes), so rollout workers are
simulated as one vectorized environment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OBS_DIM = 6
ACTION_DIM = 2
PROJ_DIM = 2

POS = slice(0, 2)
VEL = slice(2, 4)
PREV_ACTION = slice(4, 6)


class EnvError(ValueError):
    """Invalid input to the environment (e.g. a non-finite action)."""


@dataclass(frozen=True)
class EnvParams:
    dt: float = 0.05
    accel_scale: float = 4.0
    drag: float = 0.5
    v_max: float = 2.0
    p_max: float = 5.0
    episode_length: int = 250
    reset_range: float = 1.0


@dataclass
class EnvState:
    obs: np.ndarray  # (..., 6) float32
    step: np.ndarray  # (...,) int

    @property
    def position(self) -> np.ndarray:
        return self.obs[..., POS]

    @property
    def velocity(self) -> np.ndarray:
        return self.obs[..., VEL]

    @property
    def prev_action(self) -> np.ndarray:
        return self.obs[..., PREV_ACTION]

    def copy(self) -> "EnvState":
        return EnvState(self.obs.copy(), self.step.copy())


@dataclass(frozen=True)
class TaskSpec:
    """Velocity command ``target`` tracked with a Gaussian reward of width ``sigma``."""

    target: tuple[float, float]
    sigma: float = 0.3

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.target))

    @property
    def name(self) -> str:
        return f"v({self.target[0]:+.2f}|{self.target[1]:+.2f})"


def task_grid(radii=(0.4, 0.8, 1.2, 1.6), sigma: float = 0.3) -> list[TaskSpec]:
    """Origin plus four headings per ring; odd rings are rotated by 45 degrees."""
    tasks = [TaskSpec((0.0, 0.0), sigma)]
    for i, r in enumerate(radii):
        offset = 0.25 * np.pi if i % 2 else 0.0
        for k in range(4):
            ang = offset + 0.5 * np.pi * k
            vx, vy = r * np.cos(ang), r * np.sin(ang)
            tasks.append(TaskSpec((float(vx), float(vy)), sigma))
    return tasks


class PointMass:
    def __init__(self, params: EnvParams | None = None):
        self.params = params or EnvParams()

    def reset(self, rng: np.random.Generator | int, n: int | None = None) -> EnvState:
        """Position uniform in the reset box, zero velocity and previous action."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        shape = () if n is None else (n,)
        obs = np.zeros(shape + (OBS_DIM,), dtype=np.float32)
        r = self.params.reset_range
        obs[..., POS] = rng.uniform(-r, r, size=shape + (2,))
        return EnvState(obs, np.zeros(shape, dtype=np.int64))

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray]:
        p = self.params
        action = np.asarray(action, dtype=np.float32)
        if not np.all(np.isfinite(action)):
            raise EnvError("non-finite action")
        a = np.clip(action, -1.0, 1.0)
        v = state.velocity
        dt = np.float32(p.dt)
        v_new = np.clip(v + dt * (np.float32(p.accel_scale) * a - np.float32(p.drag) * v), -p.v_max, p.v_max)
        p_new = np.clip(state.position + dt * v_new, -p.p_max, p.p_max)
        obs = np.concatenate([p_new, v_new, a], axis=-1).astype(np.float32)
        steps = state.step + 1
        return EnvState(obs, steps), steps >= p.episode_length

    def is_degenerate(self, obs: np.ndarray) -> np.ndarray:
        """Pinned against a wall while still pushing outward."""
        pos, vel = obs[..., POS], obs[..., VEL]
        lim = self.params.p_max
        pinned_out = ((pos >= lim) & (vel > 0)) | ((pos <= -lim) & (vel < 0))
        return pinned_out.any(axis=-1)

    def in_bounds(self, obs: np.ndarray) -> np.ndarray:
        p = self.params
        ok = np.all(np.abs(obs[..., POS]) <= p.p_max, axis=-1)
        ok &= np.all(np.abs(obs[..., VEL]) <= p.v_max, axis=-1)
        ok &= np.all(np.abs(obs[..., PREV_ACTION]) <= 1.0, axis=-1)
        return ok & np.all(np.isfinite(obs), axis=-1)


def project(obs: np.ndarray) -> np.ndarray:
    """Behavior projection: the planar velocity."""
    obs = obs.obs if isinstance(obs, EnvState) else obs
    return obs[..., VEL]


def task_reward(next_obs: np.ndarray, task: TaskSpec) -> np.ndarray:
    """``exp(-(|v - v*| / sigma)^2)``."""
    err = project(next_obs) - np.asarray(task.target, dtype=np.float64)
    return np.exp(-np.sum(err * err, axis=-1) / task.sigma**2)


def action_rate(action: np.ndarray, prev_action: np.ndarray) -> np.ndarray:
    d = np.asarray(action, dtype=np.float64) - np.asarray(prev_action, dtype=np.float64)
    return np.sum(d * d, axis=-1)


def joint_acc_penalty(next_obs: np.ndarray) -> np.ndarray:
    # no joints on a point mass
    return np.zeros(np.shape(next_obs)[:-1])


def feet_slide_penalty(next_obs: np.ndarray) -> np.ndarray:
    return np.zeros(np.shape(next_obs)[:-1])


def reg_reward(next_obs: np.ndarray, action: np.ndarray, prev_action: np.ndarray) -> np.ndarray:
    """Behavior-regularizer reward (always <= 0)."""
    return (
        -2.5e-7 * joint_acc_penalty(next_obs)
        - 0.1 * action_rate(action, prev_action)
        - 0.1 * feet_slide_penalty(next_obs)
    )
