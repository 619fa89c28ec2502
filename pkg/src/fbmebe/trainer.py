"""Online training loop: explore, store, refit the density model, update.

Rollout workers are one vectorized point-mass batch, so a run is fully
single-threaded and reproducible from its seed. A checkpoint holds the
complete loop state; resuming from it continues the exact same trajectory.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .env import PointMass, project, reg_reward
from .explore import (
    GoalPool,
    behavior_entropy,
    build_pool,
    sample_exploration_z,
    select_training_z,
)
from .fb import FBModel, actor_loss, fb_loss, policy_action, target_next_action
from .flow import RealNVP, Whitener
from .nn import AdamState, TrainingError, adam_step, soft_update
from .regcritic import RegCritic, reg_critic_loss
from .replay import ReplayBuffer, dump_snapshot

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step", "mode", "seed", "fb_main", "fb_ortho", "fb_fz", "actor_loss",
    "regcritic_loss", "flow_nll", "behavior_entropy", "mean_action_rate",
]
_SUMS = ("fb_main", "fb_ortho", "fb_fz", "actor_loss", "regcritic_loss", "mean_action_rate")


class Divergence(TrainingError):
    """Training stopped on a non-finite loss."""


@dataclass
class TrainArtifacts:
    checkpoint: Path | None
    metrics: Path | None
    entropy: list[float] = field(default_factory=list)
    fb_loss: list[float] = field(default_factory=list)
    actor_loss: list[float] = field(default_factory=list)
    trainer: "Trainer | None" = None


def build_model(cfg: RunConfig, rng: np.random.Generator) -> tuple[FBModel, RegCritic]:
    model = FBModel.create(cfg.d, rng, cfg.forward_hidden, cfg.backward_hidden, cfg.actor_hidden)
    critic = RegCritic.create(rng, cfg.critic_hidden, tau=cfg.tau_critic)
    return model, critic


def build_flow(cfg: RunConfig) -> RealNVP:
    return RealNVP(2, cfg.flow_layers, (cfg.flow_hidden, cfg.flow_hidden))


class Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.explore_cfg = cfg.exploration()
        self.rng = np.random.default_rng(cfg.seed)
        self.env = PointMass(cfg.env_params())
        self.model, self.critic = build_model(cfg, np.random.default_rng([cfg.seed, 1]))
        self.flow = build_flow(cfg)
        self.flow_nll = math.nan
        self.replay = ReplayBuffer(cfg.buffer_capacity, cfg.goal_capacity, self.env)
        self.opt = {name: AdamState.zeros_like(net.flat) for name, net in self.trainable().items()}
        k = cfg.workers
        self.state = self.env.reset(self.rng, k)
        self.episode_ids = np.arange(k, dtype=np.int32)
        self.next_episode = k
        self.worker_z = np.zeros((k, cfg.d), dtype=np.float32)
        self.worker_steps = 0
        self.env_steps = 0
        self.grad_steps = 0
        self.refreshes = 0
        self.pool: GoalPool | None = None
        self.sums = {key: 0.0 for key in _SUMS}
        self.counts = {key: 0 for key in _SUMS}
        self.rows: list[dict] = []

    # parameters ---------------------------------------------------------------
    def trainable(self) -> dict:
        nets = {f"forward{i}": n for i, n in enumerate(self.model.forward)}
        nets["backward"] = self.model.backward
        nets["actor"] = self.model.actor
        nets.update({f"qreg{i}": n for i, n in enumerate(self.critic.nets)})
        return nets

    def _step(self, name: str, grad: np.ndarray, lr: float) -> None:
        adam_step(self.opt[name], self.trainable()[name].flat, grad, lr, name=name)

    def _soft_updates(self) -> None:
        cfg, m = self.cfg, self.model
        for online, target in zip(m.forward, m.target_forward):
            soft_update(target.flat, online.flat, cfg.tau_forward)
        soft_update(m.target_backward.flat, m.backward.flat, cfg.tau_backward)
        soft_update(m.target_actor.flat, m.actor.flat, cfg.tau_actor)
        if self.cfg.uses_critic:
            for online, target in zip(self.critic.nets, self.critic.targets):
                soft_update(target.flat, online.flat, cfg.tau_critic)

    def _add(self, key: str, value: float, count: int = 1) -> None:
        self.sums[key] += value
        self.counts[key] += count

    # loop ---------------------------------------------------------------------
    def current_pool(self) -> GoalPool | None:
        if self.pool is None and self.explore_cfg.uses_goals and len(self.replay.goals):
            self.pool = build_pool(self.replay.goals, None, self.cfg.pool_size, self.rng)
        return self.pool

    def rollout(self, n_steps: int) -> None:
        cfg = self.cfg
        k = cfg.workers
        for _ in range(n_steps):
            if self.worker_steps % cfg.z_refresh == 0:
                self.worker_z = sample_exploration_z(
                    self.model, self.current_pool(), self.explore_cfg, k, self.rng
                )
            if self.env_steps < cfg.random_steps:
                action = self.rng.uniform(-1.0, 1.0, size=(k, 2)).astype(np.float32)
            else:
                action = policy_action(self.model, self.state.obs, self.worker_z, cfg.action_noise, self.rng, cfg.noise_clip)
            nxt, done = self.env.step(self.state, action)
            r_reg = reg_reward(nxt.obs, action, self.state.prev_action)
            self.replay.extend(self.state.obs, action, nxt.obs, r_reg, done, self.episode_ids)
            self._add("mean_action_rate", float(np.sum(r_reg)), k)
            self.env_steps += k
            self.worker_steps += 1
            if np.any(done):
                idx = np.flatnonzero(done)
                fresh = self.env.reset(self.rng, len(idx))
                nxt.obs[idx] = fresh.obs
                nxt.step[idx] = 0
                self.episode_ids[idx] = self.next_episode + np.arange(len(idx), dtype=np.int32)
                self.next_episode += len(idx)
            self.state = nxt

    def update_agent(self, n: int) -> dict[str, int]:
        cfg = self.cfg
        pool = self.current_pool()
        lam = cfg.lam_reg if cfg.uses_critic else 0.0
        counts = {"fb": 0, "critic": 0, "actor": 0}
        for i in range(n):
            batch = self.replay.sample_fb_batch(cfg.batch_size, self.rng)
            z = select_training_z(self.model, pool, self.explore_cfg, cfg.batch_size, self.rng)
            a_next = target_next_action(
                self.model, batch.next_obs, z, self.rng, cfg.target_noise, cfg.noise_clip
            )
            try:
                terms, grads = fb_loss(
                    self.model, batch, z, a_next, cfg.gamma, cfg.ortho_coef, cfg.fz_coef
                )
                for name, g in grads.items():
                    self._step(name, g, cfg.lr_backward if name == "backward" else cfg.lr_forward)
                self._add("fb_main", terms.main)
                self._add("fb_ortho", terms.ortho)
                self._add("fb_fz", terms.fz)
                counts["fb"] += 1
                if cfg.uses_critic:
                    loss_c, grads_c = reg_critic_loss(self.critic, batch, a_next, cfg.gamma)
                    for name, g in grads_c.items():
                        self._step(name, g, cfg.lr_critic)
                    self._add("regcritic_loss", loss_c)
                    counts["critic"] += 1
                if (i + 1) % cfg.policy_delay == 0:
                    info, g_actor = actor_loss(
                        self.model, batch.obs, z, lam, self.critic if lam > 0 else None
                    )
                    self._step("actor", g_actor, cfg.lr_actor)
                    self._add("actor_loss", info.loss)
                    counts["actor"] += 1
                    self._soft_updates()
            except TrainingError as exc:
                raise Divergence(f"step {self.env_steps}: {exc}") from exc
            self.grad_steps += 1
        return counts

    def refresh(self) -> None:
        """Density refit, goal-pool rebuild and one metrics row."""
        cfg = self.cfg
        ecfg = self.explore_cfg
        if ecfg.uses_goals and len(self.replay.goals):
            if ecfg.beta > 0:
                trace = self.flow.fit(
                    self.replay.goals.contents(), cfg.flow_epochs,
                    seed=int(self.rng.integers(2**31)), lr=cfg.flow_lr, batch_size=cfg.flow_batch,
                )
                if trace:
                    self.flow_nll = trace[-1]
            self.pool = build_pool(self.replay.goals, self.flow, cfg.pool_size, self.rng)
        self.rows.append(self._metrics_row())
        self.sums = {key: 0.0 for key in _SUMS}
        self.counts = {key: 0 for key in _SUMS}

    def entropy(self) -> float:
        if len(self.replay) == 0:
            return math.nan
        recent = self.replay.recent_next_obs(self.cfg.entropy_window)
        lim = self.cfg.v_max
        return behavior_entropy(project(recent), self.cfg.entropy_bins, -lim, lim).entropy

    def _metrics_row(self) -> dict:
        row = {"step": self.env_steps, "mode": self.cfg.mode, "seed": self.cfg.seed}
        for key in _SUMS:
            row[key] = self.sums[key] / self.counts[key] if self.counts[key] else math.nan
        row["flow_nll"] = self.flow_nll
        row["behavior_entropy"] = self.entropy()
        return row

    def run(self, total_steps: int | None = None) -> None:
        cfg = self.cfg
        total = cfg.total_steps if total_steps is None else total_steps
        while self.env_steps < total:
            self.rollout(cfg.steps_per_update)
            if len(self.replay) >= cfg.batch_size:
                self.update_agent(cfg.grad_steps_per_update)
            if self.env_steps // cfg.flow_refresh > self.refreshes:
                self.refreshes = self.env_steps // cfg.flow_refresh
                self.refresh()

    # persistence --------------------------------------------------------------
    def metrics_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        return out.getvalue()

    def tensors(self) -> dict[str, np.ndarray]:
        t = {name: net.flat for name, net in self.model.named_nets().items()}
        t.update({name: net.flat for name, net in self.critic.named_nets().items()})
        t["flow"] = self.flow.flat
        for name, st in self.opt.items():
            t[f"adam.{name}.m"] = st.m
            t[f"adam.{name}.v"] = st.v
        r = self.replay
        n = r.size
        for key in ("obs", "action", "next_obs", "reg_reward", "done", "episode"):
            t[f"replay.{key}"] = getattr(r, key)[:n]
        t["goals"] = r.goals.data[: r.goals.size]
        t["env.obs"] = self.state.obs
        t["env.step"] = self.state.step.astype(np.int32)
        t["env.episode"] = self.episode_ids
        t["worker_z"] = self.worker_z
        if self.pool is not None:
            t["pool.states"] = self.pool.states
        return t

    def meta(self) -> dict:
        pool_ld = None
        if self.pool is not None and self.pool.log_density is not None:
            pool_ld = [float(v) for v in self.pool.log_density]
        return {
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.cfg.to_dict().items()},
            "rng": self.rng.bit_generator.state,
            "adam_t": {name: st.t for name, st in self.opt.items()},
            "counters": {
                "env_steps": self.env_steps, "grad_steps": self.grad_steps,
                "refreshes": self.refreshes, "worker_steps": self.worker_steps,
                "next_episode": self.next_episode,
                "replay_ptr": self.replay.ptr, "goal_ptr": self.replay.goals.ptr,
            },
            "flow": {
                "fitted": self.flow.fitted, "nll": _json_float(self.flow_nll),
                "mean": [float(v) for v in self.flow.whitener.mean],
                "scale": [float(v) for v in self.flow.whitener.scale],
            },
            "pool_log_density": pool_ld,
            "sums": {k: _json_float(v) for k, v in self.sums.items()},
            "counts": self.counts,
            "rows": [{k: _json_float(v) for k, v in row.items()} for row in self.rows],
        }

    def save(self, path: str | Path) -> Path:
        return ckpt.save_checkpoint(path, self.tensors(), self.meta())

    @classmethod
    def load(cls, path: str | Path, cfg: RunConfig | None = None) -> "Trainer":
        tensors, meta = ckpt.load_checkpoint(path)
        saved = RunConfig.from_dict(meta["config"])
        tr = cls(cfg or saved)
        for name, net in {**tr.model.named_nets(), **tr.critic.named_nets()}.items():
            net.flat[...] = tensors[name]
        tr.flow.flat[...] = tensors["flow"]
        for name, st in tr.opt.items():
            st.m[...] = tensors[f"adam.{name}.m"]
            st.v[...] = tensors[f"adam.{name}.v"]
            st.t = meta["adam_t"][name]
        c = meta["counters"]
        r = tr.replay
        n = len(tensors["replay.obs"])
        for key in ("obs", "action", "next_obs", "reg_reward", "done", "episode"):
            getattr(r, key)[:n] = tensors[f"replay.{key}"]
        r.size, r.ptr = n, c["replay_ptr"]
        g = tensors["goals"]
        r.goals.data[: len(g)] = g
        r.goals.size, r.goals.ptr = len(g), c["goal_ptr"]
        tr.state.obs[...] = tensors["env.obs"]
        tr.state.step[...] = tensors["env.step"]
        tr.episode_ids[...] = tensors["env.episode"]
        tr.worker_z[...] = tensors["worker_z"]
        tr.env_steps, tr.grad_steps = c["env_steps"], c["grad_steps"]
        tr.refreshes, tr.worker_steps = c["refreshes"], c["worker_steps"]
        tr.next_episode = c["next_episode"]
        f = meta["flow"]
        tr.flow.fitted = f["fitted"]
        tr.flow_nll = _from_json_float(f["nll"])
        tr.flow.whitener = Whitener(np.array(f["mean"]), np.array(f["scale"]))
        if "pool.states" in tensors:
            ld = meta["pool_log_density"]
            tr.pool = GoalPool(tensors["pool.states"], None if ld is None else np.array(ld))
        tr.sums = {k: _from_json_float(v) for k, v in meta["sums"].items()}
        tr.counts = dict(meta["counts"])
        tr.rows = [{k: _from_json_float(v) for k, v in row.items()} for row in meta["rows"]]
        tr.rng.bit_generator.state = meta["rng"]
        return tr


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _from_json_float(v):
    if isinstance(v, str) and v in ("nan", "inf", "-inf"):
        return float(v)
    return v


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def train(
    cfg: RunConfig, run_dir: str | Path | None = None, resume: str | Path | None = None
) -> TrainArtifacts:
    """Run the loop to ``cfg.total_steps`` and write artifacts into ``run_dir``.

    Writes ``metrics.csv``, ``checkpoint/`` (full state, refreshed every
    ``checkpoint_interval`` env steps) and ``replay.bin``. On divergence the
    last checkpoint is kept and :class:`Divergence` is raised.
    """
    trainer = Trainer.load(resume, cfg) if resume else Trainer(cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if not (run_dir / "checkpoint").exists():
            trainer.save(run_dir / "checkpoint")
    try:
        every = cfg.checkpoint_interval
        while trainer.env_steps < cfg.total_steps:
            # chunk boundaries only decide when to save; the loop itself is unchanged
            trainer.run(min(cfg.total_steps, (trainer.env_steps // every + 1) * every))
            if run_dir is not None and trainer.env_steps < cfg.total_steps:
                trainer.save(run_dir / "checkpoint")
    finally:
        if run_dir is not None:
            write_text_atomic(run_dir / "metrics.csv", trainer.metrics_csv())
    arts = TrainArtifacts(None, None)
    if run_dir is not None:
        arts.checkpoint = trainer.save(run_dir / "checkpoint")
        dump_snapshot(trainer.replay, run_dir / "replay.bin")
        arts.metrics = run_dir / "metrics.csv"
    arts.entropy = [row["behavior_entropy"] for row in trainer.rows]
    arts.fb_loss = [row["fb_main"] for row in trainer.rows]
    arts.actor_loss = [row["actor_loss"] for row in trainer.rows]
    arts.trainer = trainer
    return arts
