"""Forward-backward representation: networks, losses and task inference.

Shapes used throughout: ``n`` batch rows, ``d`` embedding dimension,
``obs`` raw state vectors of width 6, ``proj`` projected states of width 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .env import ACTION_DIM, OBS_DIM, PROJ_DIM, project
from .nn import DenseNet, TrainingError, mlp

if TYPE_CHECKING:
    from .regcritic import RegCritic
    from .replay import FBBatch

# Fixed input scaling: positions span +-5, velocities +-2.
OBS_SCALE = np.array([0.2, 0.2, 0.5, 0.5, 1.0, 1.0], dtype=np.float32)
PROJ_SCALE = np.array([0.5, 0.5], dtype=np.float32)
_TINY = 1e-12


class DegenerateTask(ValueError):
    """The reward samples produce a zero task embedding."""


def normalize_z(x: np.ndarray, d: int | None = None) -> np.ndarray:
    """Scale rows of ``x`` onto the sphere of radius sqrt(d)."""
    d = x.shape[-1] if d is None else d
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _TINY)
    return (np.sqrt(d) * x / norm).astype(x.dtype)


def sample_uniform_sphere(d: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if d < 2:
        raise ValueError("embedding dimension must be at least 2")
    g = rng.standard_normal((count, d))
    return normalize_z(g).astype(np.float32)


@dataclass
class FBModel:
    forward: list[DenseNet]
    backward: DenseNet
    actor: DenseNet
    target_forward: list[DenseNet]
    target_backward: DenseNet
    target_actor: DenseNet
    d: int

    @classmethod
    def create(
        cls,
        d: int,
        rng: np.random.Generator,
        forward_hidden: Sequence[int] = (256, 256),
        backward_hidden: Sequence[int] = (128, 128),
        actor_hidden: Sequence[int] = (256, 256),
        n_forward: int = 2,
    ) -> "FBModel":
        if d < 2:
            raise ValueError("embedding dimension must be at least 2")
        fwd = [mlp(OBS_DIM + ACTION_DIM + d, forward_hidden, d, rng) for _ in range(n_forward)]
        bwd = mlp(PROJ_DIM, backward_hidden, d, rng)
        actor = mlp(OBS_DIM + d, actor_hidden, ACTION_DIM, rng, out_activation="tanh")
        return cls(
            fwd, bwd, actor,
            [f.copy() for f in fwd], bwd.copy(), actor.copy(), d,
        )

    def astype(self, dtype) -> "FBModel":
        return FBModel(
            [n.astype(dtype) for n in self.forward],
            self.backward.astype(dtype),
            self.actor.astype(dtype),
            [n.astype(dtype) for n in self.target_forward],
            self.target_backward.astype(dtype),
            self.target_actor.astype(dtype),
            self.d,
        )

    @property
    def dtype(self):
        return self.backward.flat.dtype

    def named_nets(self) -> dict[str, DenseNet]:
        nets = {f"forward{i}": n for i, n in enumerate(self.forward)}
        nets["backward"] = self.backward
        nets["actor"] = self.actor
        nets.update({f"target_forward{i}": n for i, n in enumerate(self.target_forward)})
        nets["target_backward"] = self.target_backward
        nets["target_actor"] = self.target_actor
        return nets

    # inputs -------------------------------------------------------------
    def obs_in(self, obs: np.ndarray) -> np.ndarray:
        return (obs * OBS_SCALE).astype(self.dtype, copy=False)

    def proj_in(self, proj: np.ndarray) -> np.ndarray:
        return (proj * PROJ_SCALE).astype(self.dtype, copy=False)

    def embed(self, proj: np.ndarray, target: bool = False) -> np.ndarray:
        """``B(phi(s))`` for projected states, rows on the sqrt(d) sphere."""
        net = self.target_backward if target else self.backward
        return normalize_z(net.forward(self.proj_in(proj)), self.d)

    def embed_cached(self, proj: np.ndarray):
        h, cache = self.backward.forward_cached(self.proj_in(proj))
        b = normalize_z(h, self.d)
        return b, (cache, h, b)

    def embed_backward(self, cached, grad_b: np.ndarray) -> np.ndarray:
        """Parameter gradient of the online B through the sphere projection."""
        cache, h, b = cached
        norm = np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), _TINY)
        # d(sqrt(d) h/|h|) = sqrt(d)/|h| (I - u u^T) with u = b/sqrt(d)
        radial = np.sum(grad_b * b, axis=-1, keepdims=True) / self.d
        g_h = np.sqrt(self.d) / norm * (grad_b - radial * b)
        return self.backward.backward(cache, g_h.astype(h.dtype), need_input_grad=False)[0]

    def goal_z(self, proj: np.ndarray) -> np.ndarray:
        """Goal-reaching embeddings ``sqrt(d) * B(g) / |B(g)|``."""
        return self.embed(proj)

    def forward_values(self, obs, action, z, target: bool = False) -> list[np.ndarray]:
        nets = self.target_forward if target else self.forward
        x = np.concatenate([self.obs_in(obs), action.astype(self.dtype), z], axis=-1)
        return [n.forward(x) for n in nets]

    def q_value(self, obs, action, z) -> np.ndarray:
        """``min_k F_k(s, a, z)^T z``."""
        qs = [np.sum(f * z, axis=-1) for f in self.forward_values(obs, action, z)]
        return np.minimum.reduce(qs)

    def actor_mean(self, obs, z, target: bool = False) -> np.ndarray:
        net = self.target_actor if target else self.actor
        return net.forward(np.concatenate([self.obs_in(obs), z], axis=-1))


def clipped_noise(shape, scale: float, clip: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(scale * rng.standard_normal(shape), -clip, clip)


def policy_action(
    model: FBModel,
    obs: np.ndarray,
    z: np.ndarray,
    noise_scale: float = 0.0,
    rng: np.random.Generator | None = None,
    noise_clip: float = 0.5,
) -> np.ndarray:
    """Actor output plus clipped Gaussian exploration noise, kept in [-1, 1]."""
    a = model.actor_mean(obs, z)
    if noise_scale > 0:
        a = a + clipped_noise(a.shape, noise_scale, noise_clip, rng)
    return np.clip(a, -1.0, 1.0).astype(np.float32)


def target_next_action(
    model: FBModel,
    next_obs: np.ndarray,
    z: np.ndarray,
    rng: np.random.Generator | None,
    noise: float = 0.2,
    noise_clip: float = 0.5,
) -> np.ndarray:
    """Target-actor action at ``s'`` with target policy smoothing."""
    a = model.actor_mean(next_obs, z, target=True)
    if noise > 0:
        a = a + clipped_noise(a.shape, noise, noise_clip, rng)
    return np.clip(a, -1.0, 1.0).astype(model.dtype)


@dataclass
class FBLossTerms:
    main: float
    ortho: float
    fz: float
    ortho_coef: float = 100.0
    fz_coef: float = 0.1

    @property
    def total(self) -> float:
        return self.main + self.ortho_coef * self.ortho + self.fz_coef * self.fz


def _mean(x: np.ndarray) -> float:
    return float(np.mean(x, dtype=np.float64))


def ortho_loss(b: np.ndarray) -> tuple[float, np.ndarray]:
    """Sample estimate of ``|E[B B^T] - I|_F^2`` up to a constant.

    Mean of squared off-diagonal Gram entries minus twice the mean squared
    norm. Returns the value and its gradient w.r.t. ``b``.
    """
    n = b.shape[0]
    if n < 2:
        raise ValueError("orthonormality loss needs at least two rows")
    gram = b @ b.T
    off = gram.copy()
    np.fill_diagonal(off, 0.0)
    value = float(np.sum(np.square(off, dtype=np.float64)) / (n * (n - 1))) - 2.0 * _mean(
        np.diagonal(gram)
    )
    dgram = off * (2.0 / (n * (n - 1)))
    dgram[np.diag_indices(n)] = -2.0 / n
    return value, (2.0 * dgram @ b).astype(b.dtype)


def implicit_reward(b_next: np.ndarray, z: np.ndarray, ridge: float = 1e-5) -> np.ndarray:
    """``B(s')^T Sigma_B^{-1} z`` with ``Sigma_B`` estimated on the batch."""
    b64 = b_next.astype(np.float64)
    cov = b64.T @ b64 / len(b64) + ridge * np.eye(b64.shape[1])
    return np.sum(np.linalg.solve(cov, b64.T).T * z, axis=-1)


def fb_loss(
    model: FBModel,
    batch: "FBBatch",
    z: np.ndarray,
    next_action: np.ndarray,
    gamma: float = 0.98,
    ortho_coef: float = 100.0,
    fz_coef: float = 0.1,
    ridge: float = 1e-5,
    implicit_r: np.ndarray | None = None,
) -> tuple[FBLossTerms, dict[str, np.ndarray]]:
    """Contrastive TD loss with orthonormality and Fz regularizers.

    Every row's ``F(s, a, z)`` is paired with every future state in the batch,
    which uses all n^2 (row, s+) pairs. Target networks and the implicit reward
    are treated as constants; pass ``implicit_r`` to pin the latter explicitly
    (used when checking gradients numerically). Twin forward nets share the min-over-twins target
    and their losses are averaged.
    """
    n = len(batch)
    dt = model.dtype
    z = z.astype(dt, copy=False)
    x = np.concatenate([model.obs_in(batch.obs), batch.action.astype(dt), z], axis=-1)
    xt = np.concatenate([model.obs_in(batch.next_obs), next_action.astype(dt), z], axis=-1)

    b_fut, cache_fut = model.embed_cached(project(batch.future_obs))
    b_next, cache_next = model.embed_cached(project(batch.next_obs))
    b_bar = model.embed(project(batch.future_obs), target=True)
    f_bar = [net.forward(xt) for net in model.target_forward]
    m_target = np.minimum.reduce([f @ b_bar.T for f in f_bar])
    q_target = np.minimum.reduce([np.sum(f * z, axis=-1) for f in f_bar])
    if implicit_r is None:
        implicit_r = implicit_reward(b_next, z, ridge)
    fz_target = (implicit_r + gamma * q_target).astype(dt)

    k = len(model.forward)
    main = fz = 0.0
    grads: dict[str, np.ndarray] = {}
    g_fut = np.zeros_like(b_fut)
    g_next = np.zeros_like(b_next)
    for i, net in enumerate(model.forward):
        f, cache = net.forward_cached(x)
        diff = f @ b_fut.T - gamma * m_target
        diag = np.sum(f * b_next, axis=-1)
        resid = np.sum(f * z, axis=-1) - fz_target
        main += (_mean(np.square(diff, dtype=np.float64)) - 2.0 * _mean(diag)) / k
        fz += _mean(np.square(resid, dtype=np.float64)) / k

        g_m = diff * (2.0 / (k * n * n))
        g_f = g_m @ b_fut - (2.0 / (k * n)) * b_next
        g_f += (fz_coef * 2.0 / (k * n)) * resid[:, None] * z
        g_fut += g_m.T @ f
        g_next -= (2.0 / (k * n)) * f
        grads[f"forward{i}"] = net.backward(cache, g_f.astype(dt), need_input_grad=False)[0]

    ortho = 0.0  # a single row has no off-diagonal pairs
    if n > 1:
        ortho, g_orth = ortho_loss(b_fut)
        g_fut += ortho_coef * g_orth
    grad_b = model.embed_backward(cache_fut, g_fut) + model.embed_backward(cache_next, g_next)
    grads["backward"] = grad_b

    terms = FBLossTerms(main, ortho, fz, ortho_coef, fz_coef)
    for name, val in (("main", main), ("ortho", ortho), ("fz", fz)):
        if not np.isfinite(val):
            raise TrainingError(f"non-finite FB {name} loss")
    return terms, grads


@dataclass
class ActorLossInfo:
    loss: float
    q_fb: float
    q_reg: float = 0.0
    extra: dict = field(default_factory=dict)


def actor_loss(
    model: FBModel,
    obs: np.ndarray,
    z: np.ndarray,
    lam_reg: float = 0.0,
    critic: "RegCritic | None" = None,
) -> tuple[ActorLossInfo, np.ndarray]:
    """``-mean[min_k F_k(s, pi(s,z), z)^T z + lam_reg * Q_reg(s, pi(s,z))]``.

    With ``lam_reg == 0`` the critic is never evaluated.
    """
    if lam_reg < 0:
        raise ValueError("lam_reg must be non-negative")
    n = len(obs)
    dt = model.dtype
    z = z.astype(dt, copy=False)
    o = model.obs_in(obs)
    a, cache_a = model.actor.forward_cached(np.concatenate([o, z], axis=-1))
    x = np.concatenate([o, a, z], axis=-1)
    outs = [net.forward_cached(x) for net in model.forward]
    qs = np.stack([np.sum(f * z, axis=-1) for f, _ in outs])
    pick = np.argmin(qs, axis=0)
    q_fb = qs[pick, np.arange(n)]

    a_slice = slice(OBS_DIM, OBS_DIM + ACTION_DIM)
    g_a = np.zeros_like(a)
    for i, (net, (_, cache)) in enumerate(zip(model.forward, outs)):
        sel = (pick == i).astype(dt)
        if not sel.any():
            continue
        _, g_x = net.backward(cache, (-sel / n)[:, None] * z, need_param_grad=False)
        g_a += g_x[:, a_slice]

    info = ActorLossInfo(loss=0.0, q_fb=_mean(q_fb))
    total = q_fb.astype(np.float64)
    if lam_reg > 0:
        if critic is None:
            raise ValueError("lam_reg > 0 needs a regularization critic")
        q_reg, g_qa = critic.value_and_action_grad(obs, a)
        total = total + lam_reg * q_reg
        g_a += (-lam_reg / n) * g_qa
        info.q_reg = _mean(q_reg)
    info.loss = -_mean(total)
    if not np.isfinite(info.loss):
        raise TrainingError("non-finite actor loss")
    grad = model.actor.backward(cache_a, g_a.astype(dt), need_input_grad=False)[0]
    return info, grad


def infer_task_embedding(model: FBModel, proj: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """Reward-weighted mean of ``B`` over the samples, rescaled to norm sqrt(d)."""
    proj = np.asarray(proj)
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(proj) == 0 or len(proj) != len(rewards):
        raise ValueError("need matching, non-empty state and reward samples")
    z_raw = np.mean(model.embed(proj).astype(np.float64) * rewards[:, None], axis=0)
    norm = np.linalg.norm(z_raw)
    if not norm > 0:
        raise DegenerateTask("task embedding has zero norm")
    return (np.sqrt(model.d) * z_raw / norm).astype(np.float32)


def raw_task_embedding(model: FBModel, proj: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    return np.mean(model.embed(proj).astype(np.float64) * np.asarray(rewards)[:, None], axis=0)
