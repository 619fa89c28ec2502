"""Zero-shot evaluation: infer a task embedding from reward samples, then roll it out."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import PointMass, TaskSpec, project, reg_reward, task_grid, task_reward
from .explore import behavior_entropy
from .fb import FBModel, infer_task_embedding, policy_action
from .replay import ReplayBuffer


@dataclass
class TaskResult:
    task: TaskSpec
    returns: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))


@dataclass
class EvalReport:
    tasks: list[TaskResult] = field(default_factory=list)
    behavior_entropy: float = float("nan")
    mean_action_rate: float = 0.0

    def by_speed(self, speed: float, tol: float = 1e-6) -> list[TaskResult]:
        return [t for t in self.tasks if abs(t.task.speed - speed) < tol]

    def mean_return(self, speed: float | None = None) -> float:
        tasks = self.tasks if speed is None else self.by_speed(speed)
        return float(np.mean([t.mean for t in tasks]))

    def rows(self) -> list[dict]:
        return [
            {
                "task": t.task.name, "vx": t.task.target[0], "vy": t.task.target[1],
                "speed": round(t.task.speed, 6), "mean_return": t.mean, "std_return": t.std,
            }
            for t in self.tasks
        ]


def rollout_task(
    model: FBModel, env: PointMass, z: np.ndarray, task: TaskSpec, episodes: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Noiseless episodes with a fixed embedding; returns per-episode returns and mean reg reward."""
    state = env.reset(rng, episodes)
    zz = np.repeat(z[None], episodes, axis=0)
    returns = np.zeros(episodes)
    reg = 0.0
    for _ in range(env.params.episode_length):
        a = policy_action(model, state.obs, zz)
        nxt, _ = env.step(state, a)
        returns += task_reward(nxt.obs, task)
        reg += float(np.sum(reg_reward(nxt.obs, a, state.prev_action)))
        state = nxt
    return returns, reg / (episodes * env.params.episode_length)


def evaluate(
    model: FBModel,
    replay: ReplayBuffer,
    tasks: list[TaskSpec] | None = None,
    episodes: int = 10,
    n_infer: int = 10_000,
    seed: int = 0,
    env: PointMass | None = None,
) -> EvalReport:
    """Per task: label ``n_infer`` buffer states with the task reward, infer
    ``z_r``, and average the returns of ``episodes`` noiseless rollouts."""
    env = env or replay.env
    tasks = task_grid() if tasks is None else tasks
    report = EvalReport()
    reg_total = 0.0
    for i, task in enumerate(tasks):
        rng = np.random.default_rng([seed, i])
        samples = replay.sample_next_obs(n_infer, rng)
        z = infer_task_embedding(model, project(samples), task_reward(samples, task))
        returns, reg = rollout_task(model, env, z, task, episodes, rng)
        report.tasks.append(TaskResult(task, [float(r) for r in returns]))
        reg_total += reg
    report.mean_action_rate = reg_total / max(len(tasks), 1)
    recent = replay.recent_next_obs(50_000)
    if len(recent):
        lim = env.params.v_max
        report.behavior_entropy = behavior_entropy(project(recent), 20, -lim, lim).entropy
    return report
