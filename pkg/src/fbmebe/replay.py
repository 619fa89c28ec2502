"""FIFO transition buffer plus the projected-goal buffer used for density fitting."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import ACTION_DIM, OBS_DIM, PROJ_DIM, PointMass, project


class NotReady(LookupError):
    """Not enough data stored to serve the request."""


class RejectedTransition(ValueError):
    pass


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reg_reward: float
    done: bool
    episode: int


@dataclass
class FBBatch:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    future_obs: np.ndarray
    reg_reward: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


class GoalBuffer:
    """Ring buffer of projected states."""

    def __init__(self, capacity: int, dim: int = PROJ_DIM):
        self.capacity = int(capacity)
        self.data = np.zeros((self.capacity, dim), dtype=np.float32)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def extend(self, goals: np.ndarray) -> None:
        goals = np.asarray(goals, dtype=np.float32).reshape(-1, self.data.shape[1])
        n = len(goals)
        if n > self.capacity:
            self.ptr = (self.ptr + n - self.capacity) % self.capacity
            goals, n = goals[-self.capacity :], self.capacity
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.data[idx] = goals
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def contents(self) -> np.ndarray:
        """Stored goals, oldest first."""
        if self.size < self.capacity:
            return self.data[: self.size].copy()
        return np.concatenate([self.data[self.ptr :], self.data[: self.ptr]])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise NotReady("goal buffer is empty")
        return self.data[rng.integers(0, self.size, size=n)]


class ReplayBuffer:
    """Bounded transition store with FIFO eviction.

    Every appended transition whose next state is not degenerate also pushes
    its projection into :attr:`goals`.
    """

    def __init__(self, capacity: int, goal_capacity: int = 10_000, env: PointMass | None = None):
        self.capacity = int(capacity)
        self.env = env or PointMass()
        self.obs = np.zeros((self.capacity, OBS_DIM), dtype=np.float32)
        self.action = np.zeros((self.capacity, ACTION_DIM), dtype=np.float32)
        self.next_obs = np.zeros((self.capacity, OBS_DIM), dtype=np.float32)
        self.reg_reward = np.zeros(self.capacity, dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=bool)
        self.episode = np.zeros(self.capacity, dtype=np.int32)
        self.ptr = 0
        self.size = 0
        self.goals = GoalBuffer(goal_capacity)

    def __len__(self) -> int:
        return self.size

    def _validate(self, obs, action, next_obs) -> None:
        if not np.all(self.env.in_bounds(obs)):
            raise RejectedTransition("state outside environment bounds")
        if not np.all(self.env.in_bounds(next_obs)):
            raise RejectedTransition("next state outside environment bounds")
        if not (np.all(np.isfinite(action)) and np.all(np.abs(action) <= 1.0)):
            raise RejectedTransition("action outside [-1, 1]")

    def append(self, t: Transition) -> None:
        self.extend(
            t.obs[None], t.action[None], t.next_obs[None],
            np.array([t.reg_reward]), np.array([t.done]), np.array([t.episode]),
        )

    def extend(self, obs, action, next_obs, reg_reward, done, episode) -> None:
        obs = np.asarray(obs, dtype=np.float32)
        action = np.asarray(action, dtype=np.float32)
        next_obs = np.asarray(next_obs, dtype=np.float32)
        self._validate(obs, action, next_obs)
        n = len(obs)
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.action[idx] = action
        self.next_obs[idx] = next_obs
        self.reg_reward[idx] = reg_reward
        self.done[idx] = done
        self.episode[idx] = episode
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)
        keep = ~self.env.is_degenerate(next_obs)
        if np.any(keep):
            self.goals.extend(project(next_obs[keep]))

    def order(self) -> np.ndarray:
        """Storage indices, oldest first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.ptr + np.arange(self.capacity)) % self.capacity

    def recent_next_obs(self, n: int) -> np.ndarray:
        n = min(n, self.size)
        idx = (self.ptr - n + np.arange(n)) % self.capacity
        return self.next_obs[idx]

    def sample_fb_batch(self, n: int, rng: np.random.Generator) -> FBBatch:
        """Uniform transitions plus independently drawn future states ``s+``."""
        if self.size < n or self.size == 0:
            raise NotReady(f"buffer holds {self.size} transitions, batch needs {n}")
        idx = rng.integers(0, self.size, size=n)
        fut = rng.integers(0, self.size, size=n)
        return FBBatch(
            self.obs[idx], self.action[idx], self.next_obs[idx],
            self.next_obs[fut], self.reg_reward[idx],
        )

    def sample_goal_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.goals.sample(n, rng)

    def sample_next_obs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise NotReady("buffer is empty")
        return self.next_obs[rng.integers(0, self.size, size=n)]


# Snapshot file: magic, u32 header length, JSON header, packed records.
SNAPSHOT_MAGIC = b"FBRPLY01"
RECORD_DTYPE = np.dtype(
    [
        ("obs", "<f4", (OBS_DIM,)),
        ("action", "<f4", (ACTION_DIM,)),
        ("next_obs", "<f4", (OBS_DIM,)),
        ("reg_reward", "<f4"),
        ("done", "<u4"),
        ("episode", "<i4"),
    ]
)


def dump_snapshot(buf: ReplayBuffer, path: str | Path) -> None:
    idx = buf.order()
    rec = np.zeros(len(idx), dtype=RECORD_DTYPE)
    rec["obs"] = buf.obs[idx]
    rec["action"] = buf.action[idx]
    rec["next_obs"] = buf.next_obs[idx]
    rec["reg_reward"] = buf.reg_reward[idx]
    rec["done"] = buf.done[idx]
    rec["episode"] = buf.episode[idx]
    header = json.dumps(
        {
            "fields": [
                f"{name}:{RECORD_DTYPE[name].base.str}x{int(np.prod(RECORD_DTYPE[name].shape) or 1)}"
                for name in RECORD_DTYPE.names
            ],
            "record_bytes": RECORD_DTYPE.itemsize,
            "count": len(idx),
            "capacity": buf.capacity,
            "goal_capacity": buf.goals.capacity,
        }
    ).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(rec.tobytes())
    tmp.replace(path)


def load_snapshot(path: str | Path, env: PointMass | None = None) -> ReplayBuffer:
    with open(path, "rb") as fh:
        if fh.read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise ValueError(f"{path} is not a replay snapshot")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        rec = np.frombuffer(fh.read(), dtype=RECORD_DTYPE, count=header["count"])
    buf = ReplayBuffer(header["capacity"], header["goal_capacity"], env)
    if len(rec):
        buf.extend(
            rec["obs"], rec["action"], rec["next_obs"], rec["reg_reward"],
            rec["done"].astype(bool), rec["episode"],
        )
    return buf
