"""Inverse-density behavior selection and the behavior-entropy metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .fb import FBModel, sample_uniform_sphere

log = logging.getLogger(__name__)

MODES = ("FB", "FB-Critic", "MEBE", "MEBE-abl")
UNIFORM_MODES = ("FB", "FB-Critic")


@dataclass
class ExplorationConfig:
    mode: str = "MEBE"
    beta: float = 2.0
    epsilon: float = 0.1
    goal_fraction: float = 0.8
    pool_size: int = 1024
    z_refresh: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.beta < 0 or self.epsilon <= 0:
            raise ValueError("need beta >= 0 and epsilon > 0")
        if not 0.0 <= self.goal_fraction <= 1.0:
            raise ValueError("goal_fraction must lie in [0, 1]")
        if self.pool_size < 1 or self.z_refresh < 1:
            raise ValueError("pool_size and z_refresh must be positive")

    @property
    def uses_goals(self) -> bool:
        return self.mode not in UNIFORM_MODES and self.goal_fraction > 0


def inverse_density_weights(log_q: np.ndarray, epsilon: float, beta: float) -> np.ndarray:
    """Normalized ``(q + epsilon)^(-beta)`` computed from log densities."""
    log_q = np.asarray(log_q, dtype=np.float64)
    if not np.all(np.isfinite(log_q)):
        raise ValueError("log densities must be finite")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    logits = -beta * np.logaddexp(log_q, np.log(epsilon))
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


@dataclass
class GoalPool:
    """Candidate goals drawn from the goal buffer, with their log densities."""

    states: np.ndarray
    log_density: np.ndarray | None = None

    def weights(self, epsilon: float, beta: float) -> np.ndarray:
        if beta == 0 or self.log_density is None:
            return np.full(len(self.states), 1.0 / len(self.states))
        return inverse_density_weights(self.log_density, epsilon, beta)


def build_pool(goals, flow, size: int, rng: np.random.Generator) -> GoalPool | None:
    """Draw ``size`` candidates uniformly from the goal buffer and score them."""
    if len(goals) == 0:
        return None
    states = goals.sample(size, rng)
    log_q = None
    if flow is not None and flow.fitted:
        log_q = flow.log_density(states)
    else:
        log.info("density model not fitted yet; goal weights fall back to uniform")
    return GoalPool(states, log_q)


def _mixed_z(
    model: FBModel, pool: GoalPool | None, probs: np.ndarray | None, n: int,
    goal_fraction: float, rng: np.random.Generator,
) -> np.ndarray:
    z = sample_uniform_sphere(model.d, n, rng)
    if pool is None or goal_fraction == 0:
        return z
    goal_slots = rng.random(n) < goal_fraction
    k = int(goal_slots.sum())
    if k:
        picks = rng.choice(len(pool.states), size=k, p=probs)
        z[goal_slots] = model.goal_z(pool.states[picks])
    return z


def sample_exploration_z(
    model: FBModel, pool: GoalPool | None, cfg: ExplorationConfig, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Behaviors for ``k`` rollout workers."""
    if not cfg.uses_goals:
        return sample_uniform_sphere(model.d, k, rng)
    probs = None if pool is None else pool.weights(cfg.epsilon, cfg.beta)
    return _mixed_z(model, pool, probs, k, cfg.goal_fraction, rng)


def select_training_z(
    model: FBModel, pool: GoalPool | None, cfg: ExplorationConfig, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draws from the training distribution over embeddings.

    ``MEBE`` reuses the exploration distribution; ``MEBE-abl`` trains on goals
    drawn uniformly from the pool; uniform modes use the sphere only.
    """
    if not cfg.uses_goals:
        return sample_uniform_sphere(model.d, n, rng)
    beta = 0.0 if cfg.mode == "MEBE-abl" else cfg.beta
    probs = None if pool is None else pool.weights(cfg.epsilon, beta)
    return _mixed_z(model, pool, probs, n, cfg.goal_fraction, rng)


@dataclass
class EntropyEstimate:
    entropy: float
    bins: int
    low: float
    high: float
    count: int


def behavior_entropy(
    proj: np.ndarray, bins: int = 20, low: float = -2.0, high: float = 2.0
) -> EntropyEstimate:
    """Shannon entropy (nats) of a fixed ``bins x bins`` histogram."""
    proj = np.clip(np.asarray(proj, dtype=np.float64).reshape(-1, 2), low, high)
    if len(proj) == 0:
        raise ValueError("entropy needs at least one sample")
    counts, _, _ = np.histogram2d(proj[:, 0], proj[:, 1], bins=bins, range=[[low, high], [low, high]])
    p = counts[counts > 0] / len(proj)
    h = float(-np.sum(p * np.log(p)))
    return EntropyEstimate(max(h, 0.0), bins, low, high, len(proj))
